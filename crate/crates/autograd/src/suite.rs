//! Finite-difference checks of every primitive on small fixed inputs.

use std::rc::Rc;

use crate::{grad_check, GradCheckReport, Graph, Mode, ParamStore, Result, Tensor, Var};

/// Deterministic values in `(-1, 1)` from an additive low-discrepancy sequence.
fn fixture(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let offset = (salt as f64 * 0.569_840_290_998_053_3).fract();
    let data = (1..=n)
        .map(|k| ((k as f64 * 0.754_877_666_246_692_7 + offset).fract() * 2.0 - 1.0) * 0.95)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("fixture shape")
}

/// `Σ x ⊙ w` for a fixed probe `w`, so no upstream gradient is uniform.
fn probe_sum(g: &mut Graph, x: Var, salt: u64) -> Result<Var> {
    let w = g.constant(fixture(g.value(x).shape(), salt + 100));
    let prod = g.hadamard(x, w)?;
    Ok(g.sum(prod))
}

type Case = (&'static str, Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>);

/// Grad-check report per primitive (composite cases cover slicing with
/// concatenation). Inputs are fixed, so reports are reproducible.
pub fn primitive_suite(eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut store = ParamStore::new();
    let a = store.add("a", fixture(&[3, 4], 1))?;
    let b = store.add("b", fixture(&[3, 4], 2))?;
    let m = store.add("m", fixture(&[4, 2], 3))?;
    let bias = store.add("bias", fixture(&[1, 4], 4))?;
    let gain = store.add("gain", fixture(&[4], 5))?;
    let shift = store.add("shift", fixture(&[4], 6))?;
    let index: Rc<[usize]> = (0..12).rev().collect::<Vec<_>>().into();

    let unary = |name: &'static str, salt: u64, op: fn(&mut Graph, Var) -> Result<Var>| -> Case {
        (
            name,
            Box::new(move |g: &mut Graph, s: &ParamStore| {
                let x = g.param(s, a);
                let z = op(g, x)?;
                probe_sum(g, z, salt)
            }),
        )
    };
    let binary = |name: &'static str, salt: u64, op: fn(&mut Graph, Var, Var) -> Result<Var>| -> Case {
        (
            name,
            Box::new(move |g: &mut Graph, s: &ParamStore| {
                let (x, y) = (g.param(s, a), g.param(s, b));
                let z = op(g, x, y)?;
                probe_sum(g, z, salt)
            }),
        )
    };

    let cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new(move |g, s| {
                let (x, y) = (g.param(s, a), g.param(s, m));
                let z = g.matmul(x, y)?;
                probe_sum(g, z, 0)
            }),
        ),
        binary("add", 1, |g, x, y| g.add(x, y)),
        binary("sub", 2, |g, x, y| g.sub(x, y)),
        binary("hadamard", 3, |g, x, y| g.hadamard(x, y)),
        (
            "add_row",
            Box::new(move |g, s| {
                let (x, y) = (g.param(s, a), g.param(s, bias));
                let z = g.add_row(x, y)?;
                probe_sum(g, z, 4)
            }),
        ),
        unary("scale", 5, |g, x| Ok(g.scale(x, -1.7))),
        unary("sigmoid", 6, |g, x| Ok(g.sigmoid(x))),
        unary("tanh", 7, |g, x| Ok(g.tanh(x))),
        unary("gelu", 8, |g, x| Ok(g.gelu(x))),
        unary("softmax_rows", 9, |g, x| g.softmax_rows(x)),
        (
            "layer_norm",
            Box::new(move |g, s| {
                let (x, gv, bv) = (g.param(s, a), g.param(s, gain), g.param(s, shift));
                let z = g.layer_norm(x, gv, bv, 1e-5)?;
                probe_sum(g, z, 10)
            }),
        ),
        unary("transpose", 11, |g, x| g.transpose(x)),
        unary("slice_cols+concat_cols", 12, |g, x| {
            let l = g.slice_cols(x, 0, 1)?;
            let r = g.slice_cols(x, 2, 2)?;
            g.concat_cols(&[r, l, r])
        }),
        unary("slice_rows+concat_rows", 13, |g, x| {
            let top = g.slice_rows(x, 0, 1)?;
            let rest = g.slice_rows(x, 1, 2)?;
            g.concat_rows(&[rest, top, top])
        }),
        unary("reshape", 14, |g, x| g.reshape(x, &[6, 2])),
        (
            "gather",
            Box::new(move |g, s| {
                let x = g.param(s, a);
                let z = g.gather(x, index.clone(), &[4, 3])?;
                probe_sum(g, z, 15)
            }),
        ),
        (
            "sum",
            Box::new(move |g, s| {
                let x = g.param(s, a);
                let sq = g.hadamard(x, x)?;
                Ok(g.sum(sq))
            }),
        ),
        (
            "mean",
            Box::new(move |g, s| {
                let x = g.param(s, a);
                let sq = g.hadamard(x, x)?;
                Ok(g.mean(sq))
            }),
        ),
        (
            "mse",
            Box::new(move |g, s| {
                let (x, y) = (g.param(s, a), g.param(s, b));
                g.mse(x, y)
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(move |g, s| {
                let x = g.param(s, a);
                g.softmax_cross_entropy(x, &[3, 0, 1])
            }),
        ),
        (
            "dropout",
            Box::new(move |g, s| {
                let x = g.param(s, a);
                let mut k = 0u32;
                let z = g.dropout(x, 0.3, Mode::Train, || {
                    k += 1;
                    f64::from(k % 5) / 5.0
                })?;
                probe_sum(g, z, 16)
            }),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, build)| Ok((name, grad_check(&mut store, eps, |g, s| build(g, s))?)))
        .collect()
}
