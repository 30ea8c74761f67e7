//! Feature ablation of the encoder and the importance cascade from latent
//! elements down to monitoring channels.

use dpae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::PerturbConfig;
use crate::error::{Error, Result};
use crate::model::Dpae;

/// Replacement value for ablated samples (mid-range of normalized data).
pub const ABLATION_BASELINE: f64 = 0.5;

/// Ablation regions are half a patch long.
pub fn region_len(model: &Dpae) -> usize {
    (model.config().patch_len / 2).max(1)
}

pub fn regions_per_channel(model: &Dpae) -> usize {
    model.config().samples / region_len(model)
}

/// Latent displacement for one ablated region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// `|latent(ablated) − latent(original)|` per element.
    pub magnitude: Vec<f64>,
    pub signed: Vec<f64>,
}

fn clean_latent(model: &Dpae, x: &Tensor) -> Result<Vec<f64>> {
    model.latent(x, &PerturbConfig::clean())
}

fn ablated_copy(model: &Dpae, x: &Tensor, channel: usize, region: usize, baseline: f64) -> Result<Tensor> {
    let len = region_len(model);
    if channel >= x.cols() || region >= regions_per_channel(model) {
        return Err(Error::Input(format!(
            "region ({channel}, {region}) outside {} channels × {} regions",
            x.cols(),
            regions_per_channel(model)
        )));
    }
    let mut out = x.clone();
    let cols = x.cols();
    for t in region * len..(region + 1) * len {
        out.data_mut()[t * cols + channel] = baseline;
    }
    Ok(out)
}

fn displacement(original: &[f64], ablated: &[f64]) -> Ablation {
    let signed: Vec<f64> = ablated.iter().zip(original).map(|(a, o)| a - o).collect();
    Ablation {
        magnitude: signed.iter().map(|v| v.abs()).collect(),
        signed,
    }
}

/// Ablates samples `[n·D/2, (n+1)·D/2)` of channel `m` in an unperturbed,
/// eval-mode encoding.
pub fn ablate_encoder(model: &Dpae, x: &Tensor, channel: usize, region: usize, baseline: f64) -> Result<Ablation> {
    let ablated = ablated_copy(model, x, channel, region, baseline)?;
    Ok(displacement(&clean_latent(model, x)?, &clean_latent(model, &ablated)?))
}

/// Every `(channel, region)` ablation of one sample, indexed `[m][n]`.
pub fn ablation_map(model: &Dpae, x: &Tensor, baseline: f64) -> Result<Vec<Vec<Ablation>>> {
    let original = clean_latent(model, x)?;
    (0..x.cols())
        .map(|m| {
            (0..regions_per_channel(model))
                .map(|n| {
                    let ablated = ablated_copy(model, x, m, n, baseline)?;
                    Ok(displacement(&original, &clean_latent(model, &ablated)?))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterImportance {
    /// `Ψ_m = Σ_n Σ_i ω^i_{mn} φ_i`, one entry per channel.
    pub psi: Vec<f64>,
    /// `ω_{mn} = Σ_i ω^i_{mn} φ_i`, channels × regions.
    pub heatmap: Vec<Vec<f64>>,
    /// Channel indices by descending `Ψ`, ties by index.
    pub ranking: Vec<usize>,
    /// Sample-averaged `|Δlatent|`, channels × regions × latent.
    pub omega: Vec<Vec<Vec<f64>>>,
    /// Sample-averaged signed `Δlatent`, same layout.
    pub omega_signed: Vec<Vec<Vec<f64>>>,
    pub samples: usize,
}

/// Heatmap and `Ψ` from an averaged ablation tensor and latent importance.
pub fn cascade(omega: &[Vec<Vec<f64>>], phi: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if omega.iter().flatten().any(|w| w.len() != phi.len()) {
        return Err(Error::Input(format!("ablation vectors must have length {}", phi.len())));
    }
    let heatmap: Vec<Vec<f64>> = omega
        .iter()
        .map(|regions| regions.iter().map(|w| w.iter().zip(phi).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let psi = heatmap.iter().map(|row| row.iter().sum()).collect();
    Ok((heatmap, psi))
}

pub fn ranking(psi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
    order
}

/// Averages ablation maps over `samples` and weights them by `phi`.
pub fn parameter_importance(model: &Dpae, samples: &[&Tensor], phi: &[f64], baseline: f64) -> Result<ParameterImportance> {
    let Some(first) = samples.first() else {
        return Err(Error::Input("no samples in the analysis window".into()));
    };
    if phi.len() != model.config().encoder.latent_dim {
        return Err(Error::Input(format!(
            "latent importance has length {}, model latent is {}",
            phi.len(),
            model.config().encoder.latent_dim
        )));
    }
    let (l, regions, d) = (first.cols(), regions_per_channel(model), phi.len());
    let mut omega = vec![vec![vec![0.0; d]; regions]; l];
    let mut omega_signed = omega.clone();
    let k = samples.len() as f64;
    for x in samples {
        for (m, row) in ablation_map(model, x, baseline)?.into_iter().enumerate() {
            for (n, ab) in row.into_iter().enumerate() {
                for i in 0..d {
                    omega[m][n][i] += ab.magnitude[i] / k;
                    omega_signed[m][n][i] += ab.signed[i] / k;
                }
            }
        }
    }
    let (heatmap, psi) = cascade(&omega, phi)?;
    Ok(ParameterImportance {
        ranking: ranking(&psi),
        psi,
        heatmap,
        omega,
        omega_signed,
        samples: samples.len(),
    })
}
