//! Fully connected heads (latent MLP and the end-to-end baseline share this code).

use dpae_autograd::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::early_stop::EarlyStopping;
use super::{validation_mask, FitData, FitReport, Prediction, Targets, Task};
use crate::error::{Error, Result};
use crate::model::Linear;
use crate::rng::stream;
use crate::train::{NadamConfig, NadamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    pub threshold: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// `d → 64 → 32 → out`.
    pub fn latent_head() -> Self {
        Self {
            hidden: vec![64, 32],
            lr: 1e-3,
            max_epochs: 2000,
            batch_size: 32,
            window: 20,
            threshold: 0.01,
            validation_fraction: 0.2,
            seed: 0,
        }
    }

    /// `p·l → 256 → 64 → out`.
    pub fn end_to_end() -> Self {
        Self {
            hidden: vec![256, 64],
            ..Self::latent_head()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("MLP widths, batch size and epochs must be positive".into()));
        }
        if self.window == 0 || self.threshold <= 0.0 {
            return Err(Error::Config("early-stop window must be >= 1 and threshold > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-feature affine map to zero mean and unit variance (unit scale for
/// constant features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows.clone() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlpHead {
    task: Task,
    input_dim: usize,
    store: ParamStore,
    layers: Vec<Linear>,
    input_norm: Standardizer,
    /// Regression targets are fitted as `(y − mean) / scale`; a zero scale
    /// marks a constant target.
    target_norm: Option<(f64, f64)>,
}

fn build_layers(store: &mut ParamStore, seed: u64, widths: &[usize]) -> Result<Vec<Linear>> {
    let mut rng = stream(seed, 0);
    widths
        .windows(2)
        .enumerate()
        .map(|(j, w)| Linear::new(store, &mut rng, &format!("head.fc{j}"), w[0], w[1]))
        .collect()
}

impl MlpHead {
    pub(crate) fn from_parts(
        task: Task,
        input_dim: usize,
        hidden: &[usize],
        input_norm: Standardizer,
        target_norm: Option<(f64, f64)>,
        seed: u64,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(task.outputs());
        let mut store = ParamStore::new();
        let layers = build_layers(&mut store, seed, &widths)?;
        Ok(Self {
            task,
            input_dim,
            store,
            layers,
            input_norm,
            target_norm,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| self.store.value(l.bias).numel())
            .collect()
    }

    pub fn input_norm(&self) -> &Standardizer {
        &self.input_norm
    }

    pub fn target_norm(&self) -> Option<(f64, f64)> {
        self.target_norm
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if j < last {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    fn batch_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for row in rows {
            if row.len() != self.input_dim {
                return Err(Error::Input(format!(
                    "head expects {} inputs, got {}",
                    self.input_dim,
                    row.len()
                )));
            }
            data.extend(self.input_norm.apply(row));
        }
        Ok(Tensor::new(vec![rows.len(), self.input_dim], data)?)
    }

    /// Raw outputs (logits, or standardized regression value) per row.
    fn outputs(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let x = self.batch_tensor(rows)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, &self.store, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.outputs(rows)?;
        Ok((0..rows.len())
            .map(|r| match self.task {
                Task::Classify { .. } => Prediction::Probabilities(softmax(out.row_slice(r))),
                Task::Regress => {
                    let (m, s) = self.target_norm.unwrap_or((0.0, 1.0));
                    Prediction::Value(out.get(r, 0) * s + m)
                }
            })
            .collect())
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        Ok(self.predict_batch(&[input.to_vec()])?.remove(0))
    }

    /// Mean loss over `rows` with the training objective.
    fn loss(&self, store: &ParamStore, rows: &[Vec<f64>], targets: &TargetSlice) -> Result<(Graph, Var)> {
        let x = self.batch_tensor(rows)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, store, xv)?;
        let loss = match targets {
            TargetSlice::Classes(labels) => g.softmax_cross_entropy(out, labels)?,
            TargetSlice::Values(values) => {
                let t = g.constant(Tensor::new(vec![values.len(), 1], values.clone())?);
                g.mse(out, t)?
            }
        };
        Ok((g, loss))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.iter().map(|e| e / total).collect()
}

enum TargetSlice {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl TargetSlice {
    fn select(targets: &Targets, idx: &[usize], norm: Option<(f64, f64)>) -> Self {
        match targets {
            Targets::Classes(c) => Self::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let (m, s) = norm.unwrap_or((0.0, 1.0));
                let s = if s > 0.0 { s } else { 1.0 };
                Self::Values(idx.iter().map(|&i| (v[i] - m) / s).collect())
            }
        }
    }
}

/// Mini-batch NAdam with validation-based early stopping; the weights with
/// the best validation loss are restored at the end.
pub fn fit_mlp(data: &FitData, task: Task, config: &MlpConfig) -> Result<(MlpHead, FitReport)> {
    config.validate()?;
    data.validate(task)?;
    let dim = data.inputs[0].len();

    let is_val = validation_mask(&data.groups, &data.strata, config.validation_fraction, config.seed);
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| !is_val[i]).collect();
    let val_idx: Vec<usize> = (0..data.len()).filter(|&i| is_val[i]).collect();
    if let Targets::Classes(labels) = &data.targets {
        let first = labels[train_idx[0]];
        if train_idx.iter().all(|&i| labels[i] == first) {
            return Err(Error::Input("training set contains a single class".into()));
        }
    }

    let input_norm = Standardizer::fit(train_idx.iter().map(|&i| data.inputs[i].as_slice()), dim);
    let target_norm = match &data.targets {
        Targets::Values(v) => {
            let s = Standardizer::fit(train_idx.iter().map(|&i| std::slice::from_ref(&v[i])), 1);
            let constant = train_idx.iter().all(|&i| v[i] == v[train_idx[0]]);
            // A zero output scale reproduces a constant target exactly.
            Some((s.mean[0], if constant { 0.0 } else { s.scale[0] }))
        }
        Targets::Classes(_) => None,
    };
    let mut head = MlpHead::from_parts(task, dim, &config.hidden, input_norm, target_norm, config.seed)?;

    let mut opt = NadamState::new(
        &head.store,
        NadamConfig {
            lr: config.lr,
            ..NadamConfig::default()
        },
    )?;
    let mut order_rng = stream(config.seed, 1);
    let mut order = train_idx.clone();
    let rows = |idx: &[usize]| idx.iter().map(|&i| data.inputs[i].clone()).collect::<Vec<_>>();
    let val_rows = rows(&val_idx);
    let val_targets = TargetSlice::select(&data.targets, &val_idx, target_norm);
    let all_train_rows = rows(&train_idx);
    let all_train_targets = TargetSlice::select(&data.targets, &train_idx, target_norm);

    let mut stopper = EarlyStopping::new(config.window, config.threshold);
    let mut report = FitReport::new(config.max_epochs, head.param_count());
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let batch_rows = rows(batch);
            let targets = TargetSlice::select(&data.targets, batch, target_norm);
            head.store.zero_grads();
            let (g, loss) = head.loss(&head.store, &batch_rows, &targets)?;
            g.backward(loss, &mut head.store)?;
            opt.step(&mut head.store)?;
        }
        let (g, train_loss) = head.loss(&head.store, &all_train_rows, &all_train_targets)?;
        let train_loss = g.value(train_loss).data()[0];
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let (g, v) = head.loss(&head.store, &val_rows, &val_targets)?;
            g.value(v).data()[0]
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("head loss at epoch {epoch}")));
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.stopping_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, head.store.clone()));
            report.best_epoch = epoch;
        }
        if stopper.update(val_loss) {
            report.stopped_early = true;
            break;
        }
    }
    if let Some((_, store)) = best {
        head.store = store;
    }
    Ok((head, report))
}
