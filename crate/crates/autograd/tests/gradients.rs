use dpae_autograd::{grad_check, primitive_suite, Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum against a fixed random probe so no gradient is trivially uniform.
fn probe_sum(g: &mut Graph, x: dpae_autograd::Var, seed: u64) -> dpae_autograd::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let prod = g.hadamard(x, w).unwrap();
    g.sum(prod)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, &[3, 4])).unwrap();
    let b = store.add("b", random(&mut rng, &[4, 2])).unwrap();
    let report = grad_check(&mut store, EPS, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let c = g.matmul(av, bv)?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn hadamard_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, &[2, 5])).unwrap();
    let b = store.add("b", random(&mut rng, &[2, 5])).unwrap();
    let report = grad_check(&mut store, EPS, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let c = g.hadamard(av, bv)?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[4, 6])).unwrap();
    let gain = store.add("gain", random(&mut rng, &[6])).unwrap();
    let bias = store.add("bias", random(&mut rng, &[6])).unwrap();
    let report = grad_check(&mut store, EPS, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
        let y = g.layer_norm(xv, gv, bv, 1e-5)?;
        Ok(probe_sum(g, y, 30))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn every_primitive_passes_grad_check() {
    let reports = primitive_suite(EPS).unwrap();
    assert_eq!(reports.len(), 21);
    for (name, report) in reports {
        assert!(report.entries > 0, "{name}");
        assert!(report.max_rel_error <= 1e-5, "{name}: {report:?}");
    }
}

#[test]
fn dropout_with_fixed_draws_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, &[3, 4])).unwrap();
    let report = grad_check(&mut store, EPS, |g, s| {
        let x = g.param(s, a);
        let mut k = 0u32;
        let z = g.dropout(x, 0.3, Mode::Train, || {
            k += 1;
            f64::from(k % 5) / 5.0
        })?;
        Ok(probe_sum(g, z, 14))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn grad_check_on_quadratic_is_exact() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![0.3, -1.2, 2.0])).unwrap();
    let report = grad_check(&mut store, 1e-4, |g, s| {
        let x = g.param(s, w);
        let sq = g.hadamard(x, x)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
    assert_eq!(report.entries, 3);
}

#[test]
fn grad_check_rejects_bad_eps_and_nonfinite() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![1.0])).unwrap();
    let f = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, w);
        Ok(g.sum(x))
    };
    assert!(grad_check(&mut store, 1e-2, f).is_err());
    let bad = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, w);
        let inf = g.scale(x, f64::INFINITY);
        Ok(g.sum(inf))
    };
    assert!(grad_check(&mut store, 1e-5, bad).is_err());
}

#[test]
fn repeated_backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, &[4, 4])).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, a);
    let y = g.matmul(x, x).unwrap();
    let z = g.softmax_rows(y).unwrap();
    let root = probe_sum(&mut g, z, 99);

    g.backward(root, &mut store).unwrap();
    let first = store.get(a).grad().clone();
    store.zero_grads();
    g.backward(root, &mut store).unwrap();
    assert_eq!(store.get(a).grad(), &first);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
        spread in 0.1f64..500.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for r in 0..rows {
            let row = g.value(y).row_slice(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_small_compositions_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[2, 3])).unwrap();
        let b = store.add("b", random(&mut rng, &[3, 3])).unwrap();
        let gain = store.add("gain", random(&mut rng, &[3])).unwrap();
        let bias = store.add("bias", random(&mut rng, &[3])).unwrap();
        let report = grad_check(&mut store, EPS, |g, s| {
            let (x, w, gn, bs) = (g.param(s, a), g.param(s, b), g.param(s, gain), g.param(s, bias));
            let h = g.matmul(x, w)?;
            let h = g.layer_norm(h, gn, bs, 1e-5)?;
            let h = g.tanh(h);
            let p = g.softmax_rows(h)?;
            Ok(probe_sum(g, p, 5))
        }).unwrap();
        prop_assert!(report.max_rel_error <= 1e-5, "{:?}", report);
    }
}
