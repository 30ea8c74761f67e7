//! Resolved experiment configuration: every module's settings for one scale
//! and one master seed.

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::heads::{ForestConfig, MlpConfig};
use crate::interpret::DEFAULT_BACKGROUND;
use crate::model::DpaeConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// One `(snr_db, ratio_pad)` evaluation condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSetting {
    pub snr_db: f64,
    pub ratio_pad: f64,
}

/// Moderate reconstruction setting.
pub const MODERATE: PerturbSetting = PerturbSetting {
    snr_db: 30.0,
    ratio_pad: 0.20,
};

/// Heaviest perturbation the autoencoder is expected to handle.
pub const STRESS: PerturbSetting = PerturbSetting {
    snr_db: 25.0,
    ratio_pad: 0.40,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub mlp: MlpConfig,
    pub end_to_end: MlpConfig,
    pub forest: ForestConfig,
    /// Perturbation draws per training event for head fitting.
    pub train_replicates: usize,
    /// Fresh perturbation draws per event for evaluation.
    pub test_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretConfig {
    pub background: usize,
    pub coalition_samples: usize,
    /// Only events with sizes in this band enter the channel importance.
    pub size_band_cm: (f64, f64),
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: DpaeConfig,
    pub train: TrainConfig,
    pub heads: HeadsConfig,
    pub interpret: InterpretConfig,
    /// Conditions for reconstruction and head evaluation; heads are fitted on the first.
    pub perturbations: Vec<PerturbSetting>,
}

impl ExperimentConfig {
    pub fn new(scale: Scale, seed: u64) -> Self {
        let (data, model, epochs, band, coalitions) = match scale {
            Scale::Desk => (GeneratorConfig::desk(seed), DpaeConfig::desk(), 150, (2.0, 20.0), 512),
            Scale::Paper => (GeneratorConfig::paper(seed), DpaeConfig::paper(), 1000, (9.1, 9.7), 2048),
        };
        let mut config = Self {
            scale,
            seed,
            data,
            model,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            heads: HeadsConfig {
                mlp: MlpConfig::latent_head(),
                end_to_end: MlpConfig::end_to_end(),
                forest: ForestConfig::default(),
                train_replicates: 8,
                test_replicates: 8,
            },
            interpret: InterpretConfig {
                background: DEFAULT_BACKGROUND,
                coalition_samples: coalitions,
                size_band_cm: band,
                baseline: crate::interpret::ABLATION_BASELINE,
            },
            perturbations: vec![MODERATE, STRESS],
        };
        config.set_seed(seed);
        config
    }

    /// Propagates the master seed to every module; modules keep disjoint
    /// streams of it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self.heads.mlp.seed = seed;
        self.heads.end_to_end.seed = seed;
        self.heads.forest.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.heads.mlp.validate()?;
        self.heads.end_to_end.validate()?;
        if self.data.samples != self.model.samples || self.data.channels.len() != self.model.channels {
            return Err(Error::Config(format!(
                "data grid {}×{} does not match model grid {}×{}",
                self.data.samples,
                self.data.channels.len(),
                self.model.samples,
                self.model.channels
            )));
        }
        if self.perturbations.is_empty() {
            return Err(Error::Config("at least one perturbation setting is required".into()));
        }
        if self.heads.train_replicates == 0 || self.heads.test_replicates == 0 {
            return Err(Error::Config("replicate counts must be positive".into()));
        }
        let (lo, hi) = self.interpret.size_band_cm;
        if !(lo < hi) || self.interpret.background == 0 {
            return Err(Error::Config("invalid size band or empty background".into()));
        }
        Ok(())
    }
}
