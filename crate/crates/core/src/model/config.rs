use serde::{Deserialize, Serialize};

use crate::data::PatchGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub latent_dim: usize,
    /// Hidden widths of the latent head between `lstm_hidden` and `latent_dim`.
    pub head_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

/// Full autoencoder geometry. The patch length `D` is both the token width
/// and the number of samples per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpaeConfig {
    pub samples: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn mlp_hidden(patch_len: usize, ratio: f64) -> usize {
    ((patch_len as f64 * ratio).round() as usize).max(1)
}

impl DpaeConfig {
    /// 200 samples × 38 channels, patches of 40, four-block encoder and decoder.
    pub fn paper() -> Self {
        Self {
            samples: 200,
            channels: 38,
            patch_len: 40,
            encoder: EncoderConfig {
                depth: 4,
                heads: 4,
                mlp_ratio: 0.8,
                dropout: 0.1,
                lstm_layers: 2,
                lstm_hidden: 40,
                latent_dim: 128,
                head_widths: vec![64, 96],
            },
            decoder: DecoderConfig {
                depth: 4,
                heads: 4,
                mlp_ratio: 0.8,
                dropout: 0.1,
            },
        }
    }

    /// Reduced geometry for single-core runs.
    pub fn desk() -> Self {
        Self {
            samples: 80,
            channels: 8,
            patch_len: 20,
            encoder: EncoderConfig {
                depth: 2,
                heads: 2,
                mlp_ratio: 0.8,
                dropout: 0.1,
                lstm_layers: 2,
                lstm_hidden: 20,
                latent_dim: 32,
                head_widths: vec![24, 28],
            },
            decoder: DecoderConfig {
                depth: 2,
                heads: 2,
                mlp_ratio: 0.8,
                dropout: 0.1,
            },
        }
    }

    /// Smallest geometry exercising every mechanism; used for gradient checks.
    pub fn toy() -> Self {
        Self {
            samples: 8,
            channels: 2,
            patch_len: 4,
            encoder: EncoderConfig {
                depth: 1,
                heads: 2,
                mlp_ratio: 0.8,
                dropout: 0.1,
                lstm_layers: 2,
                lstm_hidden: 3,
                latent_dim: 3,
                head_widths: vec![4, 3],
            },
            decoder: DecoderConfig {
                depth: 1,
                heads: 2,
                mlp_ratio: 0.8,
                dropout: 0.1,
            },
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.samples, self.channels, self.patch_len)
    }

    pub fn seq_len(&self) -> usize {
        self.channels * (self.samples / self.patch_len.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let d = self.patch_len;
        for (what, heads, ratio, dropout) in [
            ("encoder", self.encoder.heads, self.encoder.mlp_ratio, self.encoder.dropout),
            ("decoder", self.decoder.heads, self.decoder.mlp_ratio, self.decoder.dropout),
        ] {
            if heads == 0 || !d.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{what}: patch length {d} not divisible by {heads} heads"
                )));
            }
            if ratio <= 0.0 || !(0.0..1.0).contains(&dropout) {
                return Err(Error::Config(format!("{what}: bad mlp ratio or dropout")));
            }
        }
        if !d.is_multiple_of(2) {
            return Err(Error::Config("patch length must be even for sin-cos encoding".into()));
        }
        let e = &self.encoder;
        if e.lstm_layers == 0 || e.lstm_hidden == 0 || e.latent_dim == 0 || e.head_widths.len() != 2
        {
            return Err(Error::Config(
                "encoder needs LSTM layers, positive widths and two head hidden widths".into(),
            ));
        }
        if e.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}
