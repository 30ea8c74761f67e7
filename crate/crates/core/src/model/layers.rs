//! Building blocks shared by encoder, decoder and the diagnosis heads.

use dpae_autograd::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::{mlp_hidden, LAYER_NORM_EPS};
use crate::error::Result;
use crate::rng::Rng;

/// Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

pub(crate) fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("positive dims")
}

/// Forward context: train/eval mode plus the dropout randomness.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl Ctx<'_> {
    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        let rng = &mut *self.rng;
        Ok(g.dropout(x, rate, self.mode, || rng.random::<f64>())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, width]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }
}

/// Multi-head self-attention weights: one `D × 3D_h` projection per head
/// and a `(k·D_h) × D` output projection, no biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsaParams {
    pub qkv: Vec<ParamId>,
    pub out: ParamId,
    pub head_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub msa: MsaParams,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl BlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: f64,
        dropout: f64,
    ) -> Result<Self> {
        let head_dim = width / heads;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), width)?;
        let qkv = (0..heads)
            .map(|h| {
                store.add(
                    format!("{name}.msa.head{h}.u_qkv"),
                    xavier(rng, width, 3 * head_dim),
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = store.add(format!("{name}.msa.u_msa"), xavier(rng, heads * head_dim, width))?;
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), width)?;
        let hidden = mlp_hidden(width, mlp_ratio);
        let fc1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), width, hidden)?;
        let fc2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, width)?;
        Ok(Self {
            ln1,
            msa: MsaParams { qkv, out, head_dim },
            ln2,
            fc1,
            fc2,
            dropout,
        })
    }
}

/// Per head: `[q, k, v] = x·U_qkv`, `A = softmax(q·kᵀ / √D_h)`, `SA = A·v`;
/// heads are concatenated column-wise and projected by `U_msa`.
pub fn msa(g: &mut Graph, store: &ParamStore, params: &MsaParams, x: Var) -> Result<Var> {
    let dh = params.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.qkv.len());
    for &u in &params.qkv {
        let u = g.param(store, u);
        let qkv = g.matmul(x, u)?;
        let q = g.slice_cols(qkv, 0, dh)?;
        let k = g.slice_cols(qkv, dh, dh)?;
        let v = g.slice_cols(qkv, 2 * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, v)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.param(store, params.out);
    Ok(g.matmul(cat, out)?)
}

/// Pre-norm residual block: `x' = MSA(LN(x)) + x`, `x'' = MLP(LN(x')) + x'`.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    params: &BlockParams,
    x: Var,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let rate = params.dropout;
    let h = params.ln1.forward(g, store, x)?;
    let a = msa(g, store, &params.msa, h)?;
    let a = ctx.dropout(g, a, rate)?;
    let x1 = g.add(a, x)?;

    let h = params.ln2.forward(g, store, x1)?;
    let h = params.fc1.forward(g, store, h)?;
    let h = g.gelu(h);
    let h = ctx.dropout(g, h, rate)?;
    let h = params.fc2.forward(g, store, h)?;
    Ok(g.add(h, x1)?)
}

/// Gate-packed LSTM layer; columns of the `4H` blocks are ordered i, f, g, o.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), xavier(rng, input, 4 * hidden))?,
            w_hh: store.add(format!("{name}.w_hh"), xavier(rng, hidden, 4 * hidden))?,
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(&[1, 4 * hidden]))?,
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(&[1, 4 * hidden]))?,
            hidden,
        })
    }

    /// Runs the layer over the rows of `seq` from `h = c = 0`; returns the
    /// stacked hidden states (`n × H`) and the final cell state (`1 × H`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let steps = g.value(seq).rows();
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_ih = g.param(store, self.b_ih);
        let b_hh = g.param(store, self.b_hh);
        let proj = g.matmul(seq, w_ih)?;
        let proj = g.add_row(proj, b_ih)?;

        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut c = g.constant(Tensor::zeros(&[1, hd]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(proj, t, 1)?;
            let rec = g.matmul(h, w_hh)?;
            let rec = g.add_row(rec, b_hh)?;
            let z = g.add(xt, rec)?;
            let i = g.slice_cols(z, 0, hd)?;
            let f = g.slice_cols(z, hd, hd)?;
            let gg = g.slice_cols(z, 2 * hd, hd)?;
            let o = g.slice_cols(z, 3 * hd, hd)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let gg = g.tanh(gg);
            let o = g.sigmoid(o);
            let keep = g.hadamard(f, c)?;
            let write = g.hadamard(i, gg)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.hadamard(o, tc)?;
            outputs.push(h);
        }
        let hs = g.concat_rows(&outputs)?;
        Ok((hs, c))
    }
}

/// Stacked LSTM over `sequence` rows `1..n` followed by row 0, so the class
/// token is the last input. Returns the top layer's final cell state.
pub fn lstm_traverse(g: &mut Graph, store: &ParamStore, layers: &[LstmLayer], sequence: Var) -> Result<Var> {
    let n = g.value(sequence).rows();
    let mut input = if n > 1 {
        let token = g.slice_rows(sequence, 0, 1)?;
        let rest = g.slice_rows(sequence, 1, n - 1)?;
        g.concat_rows(&[rest, token])?
    } else {
        sequence
    };
    let mut cell = None;
    for layer in layers {
        let (hs, c) = layer.forward(g, store, input)?;
        input = hs;
        cell = Some(c);
    }
    Ok(cell.expect("at least one LSTM layer"))
}
