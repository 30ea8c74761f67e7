//! Post-hoc interpretation: Shapley attributions of latent elements for the
//! diagnosis heads, their aggregation into latent importance, and the
//! ablation cascade that carries importance back to monitoring channels.

mod ablation;
mod shapley;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use ablation::{
    ablate_encoder, ablation_map, cascade, parameter_importance, ranking, region_len, regions_per_channel, Ablation,
    ParameterImportance, ABLATION_BASELINE,
};
pub use shapley::{exact_shapley, kernel_shap, kernel_weight, ScalarModel, ShapConfig, ShapResult, MAX_EXACT_DIM};

use crate::error::{Error, Result};
use crate::heads::Head;
use crate::rng::stream;

pub const DEFAULT_BACKGROUND: usize = 64;

/// `φ_i = Σ_j (|φ^cla_ij| + |φ^reg_ij|) / Σ_i Σ_j (…)`, rows indexed by sample.
pub fn latent_importance(cla: &[Vec<f64>], reg: &[Vec<f64>]) -> Result<Vec<f64>> {
    if cla.is_empty() || cla.len() != reg.len() {
        return Err(Error::Input(format!(
            "need matching non-empty attribution sets, got {} and {}",
            cla.len(),
            reg.len()
        )));
    }
    let d = cla[0].len();
    if cla.iter().chain(reg).any(|r| r.len() != d) {
        return Err(Error::Input("attribution rows differ in length".into()));
    }
    let mut phi = vec![0.0; d];
    for (c, r) in cla.iter().zip(reg) {
        for (i, p) in phi.iter_mut().enumerate() {
            *p += c[i].abs() + r[i].abs();
        }
    }
    let total: f64 = phi.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical("attributions are all zero".into()));
    }
    phi.iter_mut().for_each(|p| *p /= total);
    Ok(phi)
}

/// Up to `size` rows drawn without replacement.
pub fn sample_background(rows: &[Vec<f64>], size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 4);
    let mut idx = sample(&mut rng, rows.len(), size.min(rows.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

/// Scalar view of a head: class-1 probability for classifiers, the value for regressors.
pub fn head_output(head: &Head) -> impl Fn(&[Vec<f64>]) -> Result<Vec<f64>> + '_ {
    move |rows| Ok(head.predict_batch(rows)?.iter().map(|p| p.scalar()).collect())
}

/// Full cascade output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub phi: Vec<f64>,
    pub parameters: ParameterImportance,
    pub channel_names: Vec<String>,
    pub background_size: usize,
    pub coalition_samples: usize,
    /// Largest local-accuracy residual over all explanations.
    pub max_residual: f64,
    pub explained_samples: usize,
    pub seed: u64,
}
