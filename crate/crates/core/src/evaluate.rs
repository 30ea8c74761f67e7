//! Shared perturbed views of a dataset for the stepwise (latent) and
//! end-to-end (raw) diagnosis paths, and head evaluation on them.

use serde::{Deserialize, Serialize};

use crate::data::{perturb, Dataset};
use crate::error::Result;
use crate::heads::{FitData, Head, Targets, Task};
use crate::metrics::{classification_metrics, rmse, ClassificationMetrics};
use crate::model::Dpae;
use crate::rng::{stream, Rng};

/// Perturbation setting and replicate count for a view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub snr_db: Option<f64>,
    pub ratio_pad: f64,
    /// Independent perturbation draws per event.
    pub replicates: usize,
    pub seed: u64,
    /// Draws from a stream family disjoint from the non-fresh one, so a test
    /// view of training events never repeats a training perturbation.
    pub fresh: bool,
}

/// Perturbation stream of one `(event, replicate)` pair.
pub fn perturb_stream(seed: u64, event: usize, replicate: usize, fresh: bool) -> Rng {
    let id = (u64::from(fresh) << 63) | ((event as u64) << 24) | replicate as u64;
    stream(seed, id)
}

/// Row-aligned inputs for both paths: row `k` of `latents` is the encoding of
/// the perturbed matrix whose flattening is row `k` of `raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSet {
    pub latents: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
    pub locations: Vec<usize>,
    pub sizes: Vec<f64>,
    pub events: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Latent,
    Raw,
}

pub fn perturbed_set(model: &Dpae, dataset: &Dataset, events: &[usize], view: &ViewConfig) -> Result<PerturbedSet> {
    let grid = model.grid();
    let mut set = PerturbedSet {
        latents: Vec::new(),
        raw: Vec::new(),
        locations: Vec::new(),
        sizes: Vec::new(),
        events: Vec::new(),
    };
    for &e in events {
        let sample = &dataset.samples[e];
        for r in 0..view.replicates {
            let mut rng = perturb_stream(view.seed, e, r, view.fresh);
            let (patches, _) = perturb(&sample.matrix, grid, view.snr_db, view.ratio_pad, &mut rng)?;
            set.latents.push(model.latent_of_patches(&patches)?);
            set.raw.push(grid.unpatchify(&patches)?.data().to_vec());
            set.locations.push(sample.label.location.class_index());
            set.sizes.push(sample.label.size_cm);
            set.events.push(e);
        }
    }
    Ok(set)
}

impl PerturbedSet {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn inputs(&self, kind: InputKind) -> &[Vec<f64>] {
        match kind {
            InputKind::Latent => &self.latents,
            InputKind::Raw => &self.raw,
        }
    }

    pub fn targets(&self, task: Task) -> Targets {
        match task {
            Task::Classify { .. } => Targets::Classes(self.locations.clone()),
            Task::Regress => Targets::Values(self.sizes.clone()),
        }
    }

    /// Fit data grouped by event and stratified by location.
    pub fn fit_data(&self, kind: InputKind, task: Task) -> FitData {
        FitData {
            inputs: self.inputs(kind).to_vec(),
            targets: self.targets(task),
            groups: self.events.clone(),
            strata: self.locations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMetrics {
    Classify(ClassificationMetrics),
    Regress { rmse: f64 },
}

impl TaskMetrics {
    pub fn macro_f1(&self) -> Option<f64> {
        match self {
            TaskMetrics::Classify(m) => Some(m.macro_f1),
            TaskMetrics::Regress { .. } => None,
        }
    }

    pub fn rmse(&self) -> Option<f64> {
        match self {
            TaskMetrics::Classify(_) => None,
            TaskMetrics::Regress { rmse } => Some(*rmse),
        }
    }
}

pub fn evaluate_head(head: &Head, set: &PerturbedSet, kind: InputKind) -> Result<TaskMetrics> {
    let preds = head.predict_batch(set.inputs(kind))?;
    Ok(match head.task() {
        Task::Classify { classes } => {
            let predicted: Vec<usize> = preds.iter().map(|p| p.class().unwrap_or(0)).collect();
            TaskMetrics::Classify(classification_metrics(&predicted, &set.locations, classes)?)
        }
        Task::Regress => {
            let values: Vec<f64> = preds.iter().map(|p| p.scalar()).collect();
            TaskMetrics::Regress {
                rmse: rmse(&values, &set.sizes)?,
            }
        }
    })
}

