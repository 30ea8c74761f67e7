//! Diagnosis heads: break location (classification) and size (regression)
//! from latents, plus the end-to-end baseline over flattened perturbed matrices.

mod early_stop;
mod forest;
mod mlp;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use early_stop::{improvement, EarlyStopping};
pub use forest::{fit_random_forest, ForestConfig, Node, RandomForest, Tree};
pub use mlp::{fit_mlp, MlpConfig, MlpHead, Standardizer};

use crate::error::{io_err, json_err, Error, Result};
use crate::rng::stream;
use crate::train::ParamEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Classify { classes: usize },
    Regress,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Classify { classes } => classes,
            Task::Regress => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Probabilities(Vec<f64>),
    Value(f64),
}

impl Prediction {
    /// Most probable class; `None` for regression outputs.
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Probabilities(p) => Some(forest::argmax(p)),
            Prediction::Value(_) => None,
        }
    }

    /// Regression value, or the probability of class 1 for a classifier.
    pub fn scalar(&self) -> f64 {
        match self {
            Prediction::Probabilities(p) => p.get(1).copied().unwrap_or(p[0]),
            Prediction::Value(v) => *v,
        }
    }
}

/// Training examples for a head. `groups` ties replicate rows of the same
/// event together so validation holds out whole events; `strata` balances
/// the validation draw (break location).
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    pub groups: Vec<usize>,
    pub strata: Vec<usize>,
}

pub const MIN_FIT_SAMPLES: usize = 8;

impl FitData {
    /// One group per row; strata are the class labels, or a single stratum for regression.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Targets) -> Self {
        let n = inputs.len();
        let strata = match &targets {
            Targets::Classes(c) => c.clone(),
            Targets::Values(_) => vec![0; n],
        };
        Self {
            inputs,
            targets,
            groups: (0..n).collect(),
            strata,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub(crate) fn validate(&self, task: Task) -> Result<()> {
        let n = self.len();
        if n < MIN_FIT_SAMPLES {
            return Err(Error::Input(format!("need at least {MIN_FIT_SAMPLES} samples, got {n}")));
        }
        if self.targets.len() != n || self.groups.len() != n || self.strata.len() != n {
            return Err(Error::Input("inputs, targets, groups and strata differ in length".into()));
        }
        let d = self.inputs[0].len();
        if d == 0 || self.inputs.iter().any(|r| r.len() != d) {
            return Err(Error::Input("inputs must be non-empty and of equal length".into()));
        }
        if self.inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head inputs".into()));
        }
        match (&self.targets, task) {
            (Targets::Classes(c), Task::Classify { classes }) => {
                if classes < 2 || c.iter().any(|&k| k >= classes) {
                    return Err(Error::Input(format!("labels must lie in 0..{classes}")));
                }
                if c.iter().all(|&k| k == c[0]) {
                    return Err(Error::Input("training set contains a single class".into()));
                }
            }
            (Targets::Values(v), Task::Regress) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("regression targets".into()));
                }
            }
            _ => return Err(Error::Input("targets do not match the task".into())),
        }
        Ok(())
    }
}

/// Marks whole groups for validation: within each stratum,
/// `round(fraction · groups)` groups (at least one, never all) chosen by `seed`.
pub fn validation_mask(groups: &[usize], strata: &[usize], fraction: f64, seed: u64) -> Vec<bool> {
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut seen = BTreeMap::new();
    for (&g, &s) in groups.iter().zip(strata) {
        if seen.insert(g, s).is_none() {
            by_stratum.entry(s).or_default().push(g);
        }
    }
    let mut rng = stream(seed, 2);
    let mut held = BTreeSet::new();
    for (_, mut gs) in by_stratum {
        if fraction <= 0.0 || gs.len() < 2 {
            continue;
        }
        gs.shuffle(&mut rng);
        let k = ((gs.len() as f64 * fraction).round() as usize).clamp(1, gs.len() - 1);
        for g in &gs[..k] {
            held.insert(*g);
        }
    }
    groups.iter().map(|g| held.contains(g)).collect()
}

/// Learning curves and size of a fitted head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Last epoch run (0 for forests).
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub max_epochs: usize,
    pub stopped_early: bool,
    /// Learnable scalars for MLPs, node count for forests.
    pub param_count: usize,
}

impl FitReport {
    pub(crate) fn new(max_epochs: usize, param_count: usize) -> Self {
        Self {
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            stopping_epoch: 0,
            best_epoch: 0,
            max_epochs,
            stopped_early: false,
            param_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    RandomForest,
    EndToEndMlp,
}

#[derive(Debug, Clone)]
pub enum Head {
    Mlp(MlpHead),
    Forest(RandomForest),
}

impl Head {
    pub fn task(&self) -> Task {
        match self {
            Head::Mlp(h) => h.task(),
            Head::Forest(f) => f.task,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Mlp(h) => h.input_dim(),
            Head::Forest(f) => f.n_features,
        }
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        match self {
            Head::Mlp(h) => h.predict(input),
            Head::Forest(f) => f.predict(input),
        }
    }

    pub fn predict_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        match self {
            Head::Mlp(h) => h.predict_batch(inputs),
            Head::Forest(f) => inputs.iter().map(|x| f.predict(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpManifest {
    task: Task,
    input_dim: usize,
    hidden: Vec<usize>,
    input_norm: Standardizer,
    target_norm: Option<(f64, f64)>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
enum HeadFile {
    Mlp(MlpManifest),
    Forest(RandomForest),
}

pub const HEAD_MANIFEST: &str = "head.json";
pub const HEAD_PAYLOAD: &str = "params.bin";

/// MLPs: JSON manifest plus little-endian `f64` payload. Forests: the whole
/// tree structure as JSON.
pub fn save_head(head: &Head, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file = match head {
        Head::Forest(f) => HeadFile::Forest(f.clone()),
        Head::Mlp(h) => {
            let mut params = Vec::new();
            let mut payload = Vec::new();
            let mut offset = 0;
            for (_, p) in h.store().iter() {
                params.push(ParamEntry {
                    name: p.name().to_string(),
                    shape: p.value().shape().to_vec(),
                    offset,
                });
                offset += p.value().numel();
                payload.extend(p.value().data().iter().flat_map(|v| v.to_le_bytes()));
            }
            let path = dir.join(HEAD_PAYLOAD);
            fs::write(&path, payload).map_err(io_err(&path))?;
            HeadFile::Mlp(MlpManifest {
                task: h.task(),
                input_dim: h.input_dim(),
                hidden: h.hidden(),
                input_norm: h.input_norm().clone(),
                target_norm: h.target_norm(),
                params,
            })
        }
    };
    let path = dir.join(HEAD_MANIFEST);
    let text = serde_json::to_string_pretty(&file).map_err(json_err(&path))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_head(dir: &Path) -> Result<Head> {
    let path = dir.join(HEAD_MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    match serde_json::from_str(&text).map_err(json_err(&path))? {
        HeadFile::Forest(f) => Ok(Head::Forest(f)),
        HeadFile::Mlp(m) => {
            let payload_path = dir.join(HEAD_PAYLOAD);
            let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let mut head = MlpHead::from_parts(m.task, m.input_dim, &m.hidden, m.input_norm, m.target_norm, 0)?;
            let store = head.store_mut();
            for entry in &m.params {
                let bad = |msg: &str| Error::Format {
                    path: payload_path.clone(),
                    msg: format!("{}: {msg}", entry.name),
                };
                let id = store.find(&entry.name).ok_or_else(|| bad("unknown parameter"))?;
                let param = store.get_mut(id);
                if param.value().shape() != entry.shape.as_slice() {
                    return Err(bad("shape mismatch"));
                }
                let n = param.value().numel();
                let src = values.get(entry.offset..entry.offset + n).ok_or_else(|| bad("payload too short"))?;
                param.value_mut().data_mut().copy_from_slice(src);
            }
            Ok(Head::Mlp(head))
        }
    }
}
