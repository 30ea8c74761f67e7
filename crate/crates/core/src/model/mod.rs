//! The denoising padded autoencoder.
//!
//! Encoder: patch sequence → class token + learnable positions → transformer
//! blocks → two-layer LSTM read-out ending at the class token → three-layer
//! MLP to the latent. Decoder: latent → linear expansion to `N × D`, prepend
//! the encoded class token, add fixed sin-cos positions, transformer blocks,
//! drop the token row and unpatchify.

mod config;
pub mod layers;

use std::rc::Rc;

use dpae_autograd::{grad_check, GradCheckReport, Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub use config::{DecoderConfig, DpaeConfig, EncoderConfig, LAYER_NORM_EPS};
pub use layers::{lstm_traverse, msa, transformer_block, BlockParams, Ctx, Linear, LstmLayer, MsaParams};

use crate::data::{perturb, PatchGrid, PerturbConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub class_token: ParamId,
    pub pos_embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lstm: Vec<LstmLayer>,
    pub head: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub expand: Linear,
    pub blocks: Vec<BlockParams>,
}

/// Sin-cos table: `PE[pos][2m] = sin(pos / 10000^(2m/D))`, `PE[pos][2m+1] = cos(...)`.
pub fn compute_pe(rows: usize, cols: usize) -> Result<Tensor> {
    if cols == 0 || !cols.is_multiple_of(2) || rows == 0 {
        return Err(Error::Config(format!("positional table needs even width, got {cols}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for pos in 0..rows {
        for m in 0..cols / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * m as f64 / cols as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Graph outputs of one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `1 × d`.
    pub latent: Var,
    /// Post-transformer class-token row, `1 × D`.
    pub class_token: Var,
    /// `true` for patches zeroed by the perturbation.
    pub mask: Vec<bool>,
    /// Perturbed patch sequence fed to the encoder.
    pub patches: Tensor,
}

/// Architecture: parameter handles plus fixed tables. Graph-building
/// methods read parameter values from the store passed in.
#[derive(Debug, Clone)]
pub struct Network {
    config: DpaeConfig,
    grid: PatchGrid,
    encoder: EncoderParams,
    decoder: DecoderParams,
    pe: Tensor,
    unpatch_index: Rc<[usize]>,
}

impl Network {
    /// Registers freshly initialized parameters drawn from `seed` in `store`.
    pub fn build(config: DpaeConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let (d, n) = (config.patch_len, grid.seq_len());
        let mut rng = stream(seed, 0);

        let enc = &config.encoder;
        let class_token = store.add("encoder.class_token", layers::gaussian(&mut rng, &[1, d], TOKEN_INIT_STD))?;
        let pos_embedding = store.add(
            "encoder.pos_embedding",
            layers::gaussian(&mut rng, &[n + 1, d], TOKEN_INIT_STD),
        )?;
        let blocks = (0..enc.depth)
            .map(|q| {
                BlockParams::new(store, &mut rng, &format!("encoder.block{q}"), d, enc.heads, enc.mlp_ratio, enc.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        let lstm = (0..enc.lstm_layers)
            .map(|k| {
                let input = if k == 0 { d } else { enc.lstm_hidden };
                LstmLayer::new(store, &mut rng, &format!("encoder.lstm.layer{k}"), input, enc.lstm_hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let widths = [enc.lstm_hidden, enc.head_widths[0], enc.head_widths[1], enc.latent_dim];
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| Linear::new(store, &mut rng, &format!("encoder.head.fc{j}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams {
            class_token,
            pos_embedding,
            blocks,
            lstm,
            head,
        };

        let dec = &config.decoder;
        let expand = Linear::new(store, &mut rng, "decoder.expand", enc.latent_dim, n * d)?;
        let blocks = (0..dec.depth)
            .map(|q| {
                BlockParams::new(store, &mut rng, &format!("decoder.block{q}"), d, dec.heads, dec.mlp_ratio, dec.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams { expand, blocks };

        Ok(Self {
            pe: compute_pe(n + 1, d)?,
            unpatch_index: grid.unpatch_index(),
            config,
            grid,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &DpaeConfig {
        &self.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn encoder_params(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn decoder_params(&self) -> &DecoderParams {
        &self.decoder
    }

    /// The fixed decoder positional table.
    pub fn positional_table(&self) -> &Tensor {
        &self.pe
    }

    /// `[x_class; patches] + E_pos`, shape `(N+1) × D`.
    pub fn preprocess(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let expected = [self.grid.seq_len(), self.config.patch_len];
        if g.value(patches).shape() != expected {
            return Err(Error::Input(format!(
                "preprocess: expected {expected:?}, got {:?}",
                g.value(patches).shape()
            )));
        }
        let token = g.param(store, self.encoder.class_token);
        let seq = g.concat_rows(&[token, patches])?;
        let pos = g.param(store, self.encoder.pos_embedding);
        Ok(g.add(seq, pos)?)
    }

    /// Encoder pass over an already perturbed `N × D` patch sequence.
    /// Returns `(latent, class_token)`.
    pub fn encode_patches(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &Tensor,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Var)> {
        let input = g.constant(patches.clone());
        let mut x = self.preprocess(g, store, input)?;
        for block in &self.encoder.blocks {
            x = transformer_block(g, store, block, x, ctx)?;
        }
        let class_token = g.slice_rows(x, 0, 1)?;
        let mut h = lstm_traverse(g, store, &self.encoder.lstm, x)?;
        let last = self.encoder.head.len() - 1;
        for (j, layer) in self.encoder.head.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if j < last {
                h = g.gelu(h);
            }
        }
        Ok((h, class_token))
    }

    /// Noise → patchify → mask → encoder, with perturbation draws taken from `ctx.rng`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        snr_db: Option<f64>,
        ratio_pad: f64,
        ctx: &mut Ctx<'_>,
    ) -> Result<Encoded> {
        let (patches, mask) = perturb(x, &self.grid, snr_db, ratio_pad, &mut *ctx.rng)?;
        let (latent, class_token) = self.encode_patches(g, store, &patches, ctx)?;
        Ok(Encoded {
            latent,
            class_token,
            mask,
            patches,
        })
    }

    /// Single fully connected layer `d → N·D`, reshaped to `N × D`.
    pub fn expand_latent(&self, g: &mut Graph, store: &ParamStore, latent: Var) -> Result<Var> {
        let d = self.config.encoder.latent_dim;
        if g.value(latent).numel() != d {
            return Err(Error::Input(format!(
                "expand_latent: expected {d} latent entries, got {:?}",
                g.value(latent).shape()
            )));
        }
        let latent = g.reshape(latent, &[1, d])?;
        let flat = self.decoder.expand.forward(g, store, latent)?;
        Ok(g.reshape(flat, &[self.grid.seq_len(), self.config.patch_len])?)
    }

    /// Reconstruction `p × l` from a latent and the encoded class token.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: Var,
        class_token: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let expanded = self.expand_latent(g, store, latent)?;
        let seq = g.concat_rows(&[class_token, expanded])?;
        let pe = g.constant(self.pe.clone());
        let mut x = g.add(seq, pe)?;
        for block in &self.decoder.blocks {
            x = transformer_block(g, store, block, x, ctx)?;
        }
        let patches = g.slice_rows(x, 1, self.grid.seq_len())?;
        Ok(g.gather(
            patches,
            self.unpatch_index.clone(),
            &[self.grid.samples, self.grid.channels],
        )?)
    }

    /// Full pass `x → perturb → encode → decode`; returns `(reconstruction, encoded)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        snr_db: Option<f64>,
        ratio_pad: f64,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Encoded)> {
        let enc = self.encode(g, store, x, snr_db, ratio_pad, ctx)?;
        let out = self.decode(g, store, enc.latent, enc.class_token, ctx)?;
        Ok((out, enc))
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Dpae {
    net: Network,
    store: ParamStore,
}

impl Dpae {
    pub fn new(config: DpaeConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &DpaeConfig {
        &self.net.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.net.grid
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Split borrow for building a graph and then writing gradients back.
    pub fn parts_mut(&mut self) -> (&Network, &mut ParamStore) {
        (&self.net, &mut self.store)
    }

    /// Eval-mode latent for `x` under `perturb` (seeded by `perturb.rng_seed`).
    pub fn latent(&self, x: &Tensor, perturb: &PerturbConfig) -> Result<Vec<f64>> {
        perturb.validate()?;
        let mut rng = stream(perturb.rng_seed, 0);
        self.latent_with(x, perturb.snr_db, perturb.ratio_pad, &mut rng)
    }

    pub fn latent_with(&self, x: &Tensor, snr_db: Option<f64>, ratio_pad: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut ctx = Ctx { mode: Mode::Eval, rng };
        let enc = self.net.encode(&mut g, &self.store, x, snr_db, ratio_pad, &mut ctx)?;
        Ok(g.value(enc.latent).data().to_vec())
    }

    /// Eval-mode latent of an already perturbed patch sequence.
    pub fn latent_of_patches(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let mut rng = stream(0, 0);
        let mut g = Graph::new();
        let mut ctx = Ctx { mode: Mode::Eval, rng: &mut rng };
        let (latent, _) = self.net.encode_patches(&mut g, &self.store, patches, &mut ctx)?;
        Ok(g.value(latent).data().to_vec())
    }

    /// Eval-mode `(perturbed, reconstruction)` pair, both `p × l`.
    pub fn reconstruct(&self, x: &Tensor, perturb: &PerturbConfig) -> Result<(Tensor, Tensor)> {
        perturb.validate()?;
        let mut rng = stream(perturb.rng_seed, 0);
        let mut g = Graph::new();
        let mut ctx = Ctx { mode: Mode::Eval, rng: &mut rng };
        let (out, enc) = self.net.forward(&mut g, &self.store, x, perturb.snr_db, perturb.ratio_pad, &mut ctx)?;
        let perturbed = self.net.grid.unpatchify(&enc.patches)?;
        Ok((perturbed, g.value(out).clone()))
    }
}

/// Deterministic input in `[0, 1)` for checks that need no dataset.
pub fn probe_input(rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows * cols).map(|k| ((k * 7) % 11) as f64 / 11.0).collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Central-difference check of the train-mode encode → decode → MSE
/// composition for a freshly initialized model. Noise, masking and dropout
/// draws are replayed identically for every evaluation.
pub fn model_grad_check(config: &DpaeConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut model = Dpae::new(config.clone(), seed)?;
    let x = probe_input(config.samples, config.channels)?;
    let (net, store) = model.parts_mut();
    Ok(grad_check(store, eps, |g, s| {
        let mut rng = stream(seed, 21);
        let mut ctx = Ctx { mode: Mode::Train, rng: &mut rng };
        let (out, _) = net.forward(g, s, &x, Some(20.0), 0.25, &mut ctx)?;
        let target = g.constant(x.clone());
        g.mse(out, target)
    })?)
}
