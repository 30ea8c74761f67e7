//! End-to-end stages shared by the command line and the acceptance runs:
//! autoencoder training, head fitting and evaluation, and the importance
//! cascade.

use dpae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PerturbConfig, Split};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_head, perturbed_set, InputKind, PerturbedSet, TaskMetrics, ViewConfig};
use crate::heads::{fit_mlp, fit_random_forest, FitReport, Head, HeadKind, Task};
use crate::interpret::{
    head_output, kernel_shap, latent_importance, parameter_importance, sample_background, ImportanceReport,
    ShapConfig, MAX_EXACT_DIM,
};
use crate::metrics::{reconstruction_report, ReconstructionReport};
use crate::model::Dpae;
use crate::profile::{ExperimentConfig, PerturbSetting};
use crate::train::{train, LossRecord};

pub const LOCATION: Task = Task::Classify { classes: 2 };
pub const SIZE: Task = Task::Regress;

/// Trains a freshly initialized autoencoder on the training split.
pub fn train_autoencoder<F>(dataset: &Dataset, config: &ExperimentConfig, on_epoch: F) -> Result<(Dpae, Vec<LossRecord>)>
where
    F: FnMut(usize, &Dpae, &[LossRecord]) -> Result<()>,
{
    config.validate()?;
    let mut model = Dpae::new(config.model.clone(), config.seed)?;
    let samples: Vec<(usize, &Tensor)> = dataset
        .indices(Split::Train)
        .into_iter()
        .map(|i| (i, &dataset.samples[i].matrix))
        .collect();
    let history = train(&mut model, &samples, &config.train, on_epoch)?;
    Ok((model, history))
}

pub fn input_kind(kind: HeadKind) -> InputKind {
    match kind {
        HeadKind::Mlp | HeadKind::RandomForest => InputKind::Latent,
        HeadKind::EndToEndMlp => InputKind::Raw,
    }
}

fn view(setting: PerturbSetting, replicates: usize, seed: u64, fresh: bool) -> ViewConfig {
    ViewConfig {
        snr_db: Some(setting.snr_db),
        ratio_pad: setting.ratio_pad,
        replicates,
        seed,
        fresh,
    }
}

/// Perturbed training view used to fit every head (first configured setting).
pub fn training_view(model: &Dpae, dataset: &Dataset, config: &ExperimentConfig) -> Result<PerturbedSet> {
    let setting = config.perturbations[0];
    let events = dataset.indices(Split::Train);
    perturbed_set(model, dataset, &events, &view(setting, config.heads.train_replicates, config.seed, false))
}

#[derive(Debug, Clone)]
pub struct FittedHead {
    pub kind: HeadKind,
    pub task: Task,
    pub head: Head,
    pub fit: FitReport,
}

/// Fits each `(kind, task)` pair on the shared training view, so the stepwise
/// and end-to-end paths see the same events and perturbation draws.
pub fn fit_heads(train_set: &PerturbedSet, config: &ExperimentConfig, kinds: &[HeadKind], tasks: &[Task]) -> Result<Vec<FittedHead>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &task in tasks {
            let data = train_set.fit_data(input_kind(kind), task);
            let (head, fit) = match kind {
                HeadKind::Mlp => {
                    let (h, r) = fit_mlp(&data, task, &config.heads.mlp)?;
                    (Head::Mlp(h), r)
                }
                HeadKind::EndToEndMlp => {
                    let (h, r) = fit_mlp(&data, task, &config.heads.end_to_end)?;
                    (Head::Mlp(h), r)
                }
                HeadKind::RandomForest => {
                    let (f, r) = fit_random_forest(&data, task, &config.heads.forest)?;
                    (Head::Forest(f), r)
                }
            };
            out.push(FittedHead { kind, task, head, fit });
        }
    }
    Ok(out)
}

/// Which events a test view draws and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestView {
    /// Held-out events with fresh perturbations.
    HeldOutEvents,
    /// Training events with fresh perturbations.
    TrainingEventsFresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: TestView,
    pub snr_db: f64,
    pub ratio_pad: f64,
    pub rows: usize,
    pub metrics: TaskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub kind: HeadKind,
    pub task: Task,
    pub inputs: InputKind,
    pub fit: FitReport,
    pub evaluations: Vec<ViewMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub train_events: Vec<usize>,
    pub test_events: Vec<usize>,
    pub train_replicates: usize,
    pub test_replicates: usize,
    pub heads: Vec<HeadReport>,
}

impl MetricsReport {
    pub fn find(&self, kind: HeadKind, task: Task) -> Option<&HeadReport> {
        self.heads.iter().find(|h| h.kind == kind && h.task == task)
    }
}

impl HeadReport {
    pub fn metrics(&self, view: TestView, setting: PerturbSetting) -> Option<&TaskMetrics> {
        self.evaluations
            .iter()
            .find(|e| e.view == view && e.snr_db == setting.snr_db && e.ratio_pad == setting.ratio_pad)
            .map(|e| &e.metrics)
    }
}

/// Evaluates every head on both test views for every configured setting.
/// All heads share each view's perturbation draws.
pub fn evaluate_heads(model: &Dpae, dataset: &Dataset, config: &ExperimentConfig, heads: &[FittedHead]) -> Result<MetricsReport> {
    let train_events = dataset.indices(Split::Train);
    let test_events = dataset.indices(Split::Test);
    let mut reports: Vec<HeadReport> = heads
        .iter()
        .map(|h| HeadReport {
            kind: h.kind,
            task: h.task,
            inputs: input_kind(h.kind),
            fit: h.fit.clone(),
            evaluations: Vec::new(),
        })
        .collect();
    for &setting in &config.perturbations {
        for (which, events) in [
            (TestView::HeldOutEvents, &test_events),
            (TestView::TrainingEventsFresh, &train_events),
        ] {
            let set = perturbed_set(model, dataset, events, &view(setting, config.heads.test_replicates, config.seed, true))?;
            for (h, report) in heads.iter().zip(reports.iter_mut()) {
                report.evaluations.push(ViewMetrics {
                    view: which,
                    snr_db: setting.snr_db,
                    ratio_pad: setting.ratio_pad,
                    rows: set.len(),
                    metrics: evaluate_head(&h.head, &set, input_kind(h.kind))?,
                });
            }
        }
    }
    Ok(MetricsReport {
        seed: config.seed,
        train_events,
        test_events,
        train_replicates: config.heads.train_replicates,
        test_replicates: config.heads.test_replicates,
        heads: reports,
    })
}

/// Mean reconstruction report over the test split at one setting; sample `k`
/// uses perturbation seed `(seed, k)`.
pub fn reconstruction_summary(model: &Dpae, dataset: &Dataset, setting: PerturbSetting, seed: u64) -> Result<ReconstructionSummary> {
    let mut reports = Vec::new();
    for (k, i) in dataset.indices(Split::Test).into_iter().enumerate() {
        let x = &dataset.samples[i].matrix;
        let perturb = PerturbConfig {
            snr_db: Some(setting.snr_db),
            ratio_pad: setting.ratio_pad,
            rng_seed: reconstruction_seed(seed, k),
        };
        let (perturbed, recon) = model.reconstruct(x, &perturb)?;
        reports.push(reconstruction_report(x, &perturbed, &recon)?);
    }
    if reports.is_empty() {
        return Err(Error::Input("test split is empty".into()));
    }
    let n = reports.len() as f64;
    Ok(ReconstructionSummary {
        snr_db: setting.snr_db,
        ratio_pad: setting.ratio_pad,
        mean_improvement_ratio: reports.iter().map(|r| r.improvement_ratio).sum::<f64>() / n,
        mean_mse_model: reports.iter().map(|r| r.mse_model).sum::<f64>() / n,
        mean_mse_identity: reports.iter().map(|r| r.mse_identity).sum::<f64>() / n,
        per_sample: reports,
    })
}

pub fn reconstruction_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub snr_db: f64,
    pub ratio_pad: f64,
    pub mean_improvement_ratio: f64,
    pub mean_mse_model: f64,
    pub mean_mse_identity: f64,
    pub per_sample: Vec<ReconstructionReport>,
}

/// Unperturbed eval-mode latents of the given events.
pub fn clean_latents(model: &Dpae, dataset: &Dataset, events: &[usize]) -> Result<Vec<Vec<f64>>> {
    events
        .iter()
        .map(|&i| model.latent(&dataset.samples[i].matrix, &PerturbConfig::clean()))
        .collect()
}

/// Events whose break size lies in `[lo, hi]`.
pub fn events_in_band(dataset: &Dataset, band: (f64, f64)) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| (band.0..=band.1).contains(&dataset.samples[i].label.size_cm))
        .collect()
}

/// Shapley attributions of both heads over every event's clean latent,
/// aggregated into latent importance, then carried to channels by ablation
/// over the events in the configured size band.
pub fn explain(
    model: &Dpae,
    dataset: &Dataset,
    config: &ExperimentConfig,
    location_head: &Head,
    size_head: &Head,
) -> Result<ImportanceReport> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let latents = clean_latents(model, dataset, &all)?;
    let train_latents: Vec<Vec<f64>> = dataset.indices(Split::Train).into_iter().map(|i| latents[i].clone()).collect();
    let background = sample_background(&train_latents, config.interpret.background, config.seed);
    let d = model.config().encoder.latent_dim;
    let shap = ShapConfig {
        background,
        samples: config.interpret.coalition_samples.max(d + 2),
        seed: config.seed,
        exact: d <= MAX_EXACT_DIM.min(10),
    };
    let mut cla = Vec::with_capacity(latents.len());
    let mut reg = Vec::with_capacity(latents.len());
    let mut max_residual: f64 = 0.0;
    let (g_cla, g_reg) = (head_output(location_head), head_output(size_head));
    for z in &latents {
        let a = kernel_shap(&g_cla, z, &shap)?;
        let b = kernel_shap(&g_reg, z, &shap)?;
        max_residual = max_residual.max(a.residual).max(b.residual);
        cla.push(a.values);
        reg.push(b.values);
    }
    let phi = latent_importance(&cla, &reg)?;
    let band = events_in_band(dataset, config.interpret.size_band_cm);
    let samples: Vec<&Tensor> = band.iter().map(|&i| &dataset.samples[i].matrix).collect();
    let parameters = parameter_importance(model, &samples, &phi, config.interpret.baseline)?;
    Ok(ImportanceReport {
        phi,
        parameters,
        channel_names: dataset.channels().iter().map(|c| c.node_name.clone()).collect(),
        background_size: shap.background.len(),
        coalition_samples: shap.samples,
        max_residual,
        explained_samples: latents.len(),
        seed: config.seed,
    })
}
