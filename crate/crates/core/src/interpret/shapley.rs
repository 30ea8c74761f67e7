//! Interventional Shapley values: absent features take background values and
//! the model output is averaged over the background set.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Largest input width for exhaustive coalition enumeration.
pub const MAX_EXACT_DIM: usize = 15;

const MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub background: Vec<Vec<f64>>,
    /// Coalitions sampled per explanation (ignored when `exact`).
    pub samples: usize,
    pub seed: u64,
    /// Enumerate every coalition instead of sampling; `d ≤ MAX_EXACT_DIM` only.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    /// Mean model output over the background set.
    pub base: f64,
    pub values: Vec<f64>,
    /// `|base + Σ values − g(x)|`.
    pub residual: f64,
}

/// Batched scalar model output.
pub trait ScalarModel {
    fn outputs(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl<F> ScalarModel for F
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    fn outputs(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        self(rows)
    }
}

fn check_background(background: &[Vec<f64>], d: usize) -> Result<()> {
    if background.is_empty() {
        return Err(Error::Config("background set is empty".into()));
    }
    if background.iter().any(|b| b.len() != d) {
        return Err(Error::Input(format!("background rows must have length {d}")));
    }
    Ok(())
}

/// `E_b[g(x_S, b_rest)]` for the coalition `present`.
fn coalition_value(g: &impl ScalarModel, x: &[f64], present: &[bool], background: &[Vec<f64>]) -> Result<f64> {
    let rows: Vec<Vec<f64>> = background
        .iter()
        .map(|b| present.iter().zip(x.iter().zip(b)).map(|(&p, (&xv, &bv))| if p { xv } else { bv }).collect())
        .collect();
    let out = g.outputs(&rows)?;
    if out.len() != rows.len() || out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model output during Shapley evaluation".into()));
    }
    Ok(out.iter().sum::<f64>() / out.len() as f64)
}

fn bits(mask: usize, d: usize) -> Vec<bool> {
    (0..d).map(|i| mask >> i & 1 == 1).collect()
}

fn point_value(g: &impl ScalarModel, x: &[f64]) -> Result<f64> {
    let v = g.outputs(&[x.to_vec()])?;
    v.first().copied().filter(|v| v.is_finite()).ok_or_else(|| Error::NonFinite("model output".into()))
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact values from all `2^d` coalitions:
/// `φ_i = Σ_{S ∌ i} |S|!(d−|S|−1)!/d! · (v(S ∪ {i}) − v(S))`.
pub fn exact_shapley(g: &impl ScalarModel, x: &[f64], background: &[Vec<f64>]) -> Result<ShapResult> {
    let d = x.len();
    if d == 0 || d > MAX_EXACT_DIM {
        return Err(Error::Input(format!("exact Shapley needs 1 ≤ d ≤ {MAX_EXACT_DIM}, got {d}")));
    }
    check_background(background, d)?;
    let values: Vec<f64> = (0..1usize << d)
        .map(|mask| coalition_value(g, x, &bits(mask, d), background))
        .collect::<Result<_>>()?;
    let weight: Vec<f64> = (0..d)
        .map(|s| (ln_factorial(s) + ln_factorial(d - s - 1) - ln_factorial(d)).exp())
        .collect();
    let mut phi = vec![0.0; d];
    for (mask, v) in values.iter().enumerate() {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (values[mask | 1 << i] - v);
            }
        }
    }
    let fx = point_value(g, x)?;
    Ok(result(values[0], phi, fx))
}

fn result(base: f64, values: Vec<f64>, fx: f64) -> ShapResult {
    let residual = (base + values.iter().sum::<f64>() - fx).abs();
    ShapResult { base, values, residual }
}

/// Shapley kernel weight of a coalition of size `s` out of `d`.
pub fn kernel_weight(d: usize, s: usize) -> f64 {
    let ln_binom = ln_factorial(d) - ln_factorial(s) - ln_factorial(d - s);
    (d as f64 - 1.0) / (ln_binom.exp() * s as f64 * (d - s) as f64)
}

/// Kernel SHAP: weighted least squares of coalition values on the linear model
/// `φ_0 + Σ φ_i z_i`, with `φ_0` the background mean and `Σ φ_i = g(x) − φ_0`
/// imposed by eliminating the last coefficient. The empty and full coalitions
/// carry infinite kernel weight and enter only through these constraints.
pub fn kernel_shap(g: &impl ScalarModel, x: &[f64], config: &ShapConfig) -> Result<ShapResult> {
    let d = x.len();
    if d == 0 {
        return Err(Error::Input("cannot explain an empty input".into()));
    }
    check_background(&config.background, d)?;
    if config.exact && d > MAX_EXACT_DIM {
        return Err(Error::Input(format!("exact enumeration needs d ≤ {MAX_EXACT_DIM}, got {d}")));
    }
    if !config.exact && config.samples < d + 2 {
        return Err(Error::Config(format!("need at least d + 2 = {} coalition samples", d + 2)));
    }
    let base = coalition_value(g, x, &vec![false; d], &config.background)?;
    let fx = point_value(g, x)?;
    if d == 1 {
        return Ok(result(base, vec![fx - base], fx));
    }
    let mut samples = config.samples;
    for attempt in 0..=MAX_RETRIES {
        let coalitions = if config.exact {
            enumerate_coalitions(d)
        } else {
            sample_coalitions(d, samples, config.seed, attempt as u64)
        };
        let mut z = Vec::with_capacity(coalitions.len());
        let mut w = Vec::with_capacity(coalitions.len());
        let mut y = Vec::with_capacity(coalitions.len());
        for (mask, weight) in coalitions {
            y.push(coalition_value(g, x, &mask, &config.background)? - base);
            z.push(mask);
            w.push(weight);
        }
        if let Some(phi) = constrained_wls(&z, &w, &y, fx - base) {
            return Ok(result(base, phi, fx));
        }
        if config.exact {
            break;
        }
        samples *= 2;
    }
    Err(Error::Numerical("Kernel SHAP weighted system is singular".into()))
}

fn enumerate_coalitions(d: usize) -> Vec<(Vec<bool>, f64)> {
    (1..(1usize << d) - 1)
        .map(|mask| {
            let z = bits(mask, d);
            let s = mask.count_ones() as usize;
            (z, kernel_weight(d, s))
        })
        .collect()
}

/// Coalition sizes drawn in proportion to their total kernel mass, members
/// uniformly; every draw then carries unit weight.
fn sample_coalitions(d: usize, count: usize, seed: u64, attempt: u64) -> Vec<(Vec<bool>, f64)> {
    let mut rng = stream(seed, attempt);
    let mass: Vec<f64> = (1..d).map(|s| (d as f64 - 1.0) / (s as f64 * (d - s) as f64)).collect();
    let total: f64 = mass.iter().sum();
    (0..count)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut size = d - 1;
            for (k, m) in mass.iter().enumerate() {
                if u < *m {
                    size = k + 1;
                    break;
                }
                u -= m;
            }
            let mut z = vec![false; d];
            for i in sample(&mut rng, d, size) {
                z[i] = true;
            }
            (z, 1.0)
        })
        .collect()
}

/// Minimizes `Σ_k w_k (y_k − z_k·φ)²` subject to `Σ φ = total`.
fn constrained_wls(z: &[Vec<bool>], w: &[f64], y: &[f64], total: f64) -> Option<Vec<f64>> {
    let d = z[0].len();
    let m = d - 1;
    let a = DMatrix::from_fn(z.len(), m, |k, i| f64::from(u8::from(z[k][i])) - f64::from(u8::from(z[k][m])));
    let b = DVector::from_fn(z.len(), |k, _| y[k] - f64::from(u8::from(z[k][m])) * total);
    let wv = DVector::from_column_slice(w);
    let aw = DMatrix::from_fn(z.len(), m, |k, i| a[(k, i)] * wv[k]);
    let normal = a.transpose() * &aw;
    let rhs = aw.transpose() * b;
    let scale = normal.diagonal().amax().max(1e-300);
    let chol = normal.clone().cholesky()?;
    let diag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if diag_min * diag_min < 1e-12 * scale {
        return None;
    }
    let head = chol.solve(&rhs);
    let mut phi: Vec<f64> = head.iter().copied().collect();
    phi.push(total - phi.iter().sum::<f64>());
    Some(phi)
}
