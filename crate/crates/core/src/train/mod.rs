//! Reconstruction training: per-sample curriculum of perturbation settings,
//! one NAdam update per setting.

mod checkpoint;
mod nadam;

use std::io::Write;

use dpae_autograd::{Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, LossSummary, ParamEntry,
    CHECKPOINT_MANIFEST, CHECKPOINT_PAYLOAD,
};
pub use nadam::{NadamConfig, NadamState};

use crate::error::{Error, Result};
use crate::model::{Ctx, Dpae, Network};
use crate::rng::{stream, Rng};

/// `(snr_db, ratio_pad)` settings applied in order to every sample.
pub const DEFAULT_CURRICULUM: [(f64, f64); 5] = [(20.0, 0.40), (35.0, 0.25), (40.0, 0.10), (30.0, 0.20), (30.0, 0.20)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: NadamConfig,
    pub epochs: usize,
    pub curriculum: Vec<(f64, f64)>,
    pub seed: u64,
    /// Epoch interval between intermediate checkpoints; `None` keeps only the final one.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: NadamConfig::default(),
            epochs: 1000,
            curriculum: DEFAULT_CURRICULUM.to_vec(),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.curriculum.is_empty() {
            return Err(Error::Config("curriculum must not be empty".into()));
        }
        if let Some(&(snr, pad)) = self
            .curriculum
            .iter()
            .find(|(snr, pad)| !snr.is_finite() || !(0.0..=1.0).contains(pad))
        {
            return Err(Error::Config(format!("bad curriculum entry ({snr}, {pad})")));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub sample: usize,
    pub curriculum_index: usize,
    pub snr_db: f64,
    pub ratio_pad: f64,
    pub loss: f64,
}

/// Mean over all entries of the squared difference.
pub fn mse_loss(clean: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    if clean.shape() != reconstructed.shape() {
        return Err(Error::Input(format!(
            "mse_loss: shapes {:?} and {:?} differ",
            clean.shape(),
            reconstructed.shape()
        )));
    }
    let diff = clean.zip_map(reconstructed, |a, b| (a - b) * (a - b));
    Ok(diff.sum() / diff.numel() as f64)
}

/// For each curriculum setting in order: perturb, reconstruct, score against
/// the clean sample, backpropagate and update. Returns the pre-update losses.
pub fn train_step(
    net: &Network,
    store: &mut dpae_autograd::ParamStore,
    opt: &mut NadamState,
    x: &Tensor,
    curriculum: &[(f64, f64)],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(curriculum.len());
    for &(snr, pad) in curriculum {
        store.zero_grads();
        let mut g = Graph::new();
        let mut ctx = Ctx { mode: Mode::Train, rng };
        let (out, _) = net.forward(&mut g, store, x, Some(snr), pad, &mut ctx)?;
        let target = g.constant(x.clone());
        let loss = g.mse(out, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        g.backward(loss, store)?;
        opt.step(store)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Runs `config.epochs` passes over `samples` (dataset index, normalized
/// matrix) in a per-epoch shuffled order. `on_epoch` is called after each
/// epoch with the epoch number (1-based) and the history so far.
pub fn train<F>(model: &mut Dpae, samples: &[(usize, &Tensor)], config: &TrainConfig, mut on_epoch: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(usize, &Dpae, &[LossRecord]) -> Result<()>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut opt = NadamState::new(model.store(), config.optimizer)?;
    let mut rng = stream(config.seed, 1);
    let mut order_rng = stream(config.seed, 2);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs * samples.len() * config.curriculum.len());
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        for &k in &order {
            let (index, x) = samples[k];
            let (net, store) = model.parts_mut();
            let losses = train_step(net, store, &mut opt, x, &config.curriculum, &mut rng)?;
            for (c, (&(snr, pad), loss)) in config.curriculum.iter().zip(losses).enumerate() {
                history.push(LossRecord {
                    epoch,
                    sample: index,
                    curriculum_index: c,
                    snr_db: snr,
                    ratio_pad: pad,
                    loss,
                });
            }
        }
        on_epoch(epoch, model, &history)?;
    }
    Ok(history)
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if sums.len() < r.epoch {
            sums.resize(r.epoch, (0.0, 0));
        }
        sums[r.epoch - 1].0 += r.loss;
        sums[r.epoch - 1].1 += 1;
    }
    sums.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
}

pub fn summarize(history: &[LossRecord]) -> LossSummary {
    let means = epoch_means(history);
    LossSummary {
        steps: history.len(),
        epochs: means.len(),
        first_epoch_mean: means.first().copied(),
        last_epoch_mean: means.last().copied(),
    }
}

pub fn write_loss_csv<W: Write>(history: &[LossRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epoch,sample,curriculum_index,snr_db,ratio_pad,loss")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.sample, r.curriculum_index, r.snr_db, r.ratio_pad, r.loss
        )?;
    }
    Ok(())
}
