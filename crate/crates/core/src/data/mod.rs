//! Monitoring transients: the synthetic event generator, channel scaling,
//! and the perturbations applied before encoding.

pub mod channels;
mod dataset;
mod perturb;

use serde::{Deserialize, Serialize};

pub use channels::{default_registry, registry_subset, ChannelSpec, ResponseTemplate};
pub use dataset::{
    generate_dataset, normalize, read_dataset, write_dataset, Dataset, GeneratorConfig, NormStats,
    Split, TransientSample, MANIFEST_FILE, TEST_CLIP,
};
pub use perturb::{add_noise, mask_patches, perturb, PatchGrid, PerturbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BreakLocation {
    ColdLeg,
    HotLeg,
}

impl BreakLocation {
    pub fn class_index(self) -> usize {
        match self {
            Self::ColdLeg => 0,
            Self::HotLeg => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::ColdLeg),
            1 => Some(Self::HotLeg),
            _ => None,
        }
    }

    pub(crate) fn sign(self) -> f64 {
        match self {
            Self::ColdLeg => -1.0,
            Self::HotLeg => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ColdLeg => "cold-leg",
            Self::HotLeg => "hot-leg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisLabel {
    pub location: BreakLocation,
    pub size_cm: f64,
}
