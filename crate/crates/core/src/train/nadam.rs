//! Adam with Nesterov momentum and a momentum-decay schedule.

use dpae_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 4e-3,
        }
    }
}

impl NadamConfig {
    /// `μ_t = β₁ (1 − 0.5 · 0.96^(t·ψ))`.
    pub fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.momentum_decay))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.momentum_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NadamState {
    pub config: NadamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    /// `Π μ_1..μ_t`.
    pub mu_product: f64,
}

impl NadamState {
    pub fn new(store: &ParamStore, config: NadamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            mu_product: 1.0,
        })
    }

    /// Applies one update from the gradients held in `store`. Nothing is
    /// modified if any gradient entry is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad().is_finite()) {
            return Err(Error::NonFiniteGradient(p.name().to_string()));
        }
        let c = self.config;
        let t = self.t + 1;
        let mu_t = c.mu(t);
        let mu_next = c.mu(t + 1);
        let product = self.mu_product * mu_t;
        let bias2 = 1.0 - c.beta2.powf(t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let grad = param.grad().data().to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = param.value_mut().data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = mu_next * m[j] / (1.0 - product * mu_next) + (1.0 - mu_t) * g / (1.0 - product);
                let v_hat = v[j] / bias2;
                w[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        self.t = t;
        self.mu_product = product;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(w)).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let mut graph = dpae_autograd::Graph::new();
        let id = store.find("w").unwrap();
        let w = graph.param(store, id);
        let scaled = graph.scale(w, g);
        let root = graph.sum(scaled);
        store.zero_grads();
        graph.backward(root, store).unwrap();
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, 2.0);
        let mut opt = NadamState::new(&store, NadamConfig::default()).unwrap();
        opt.step(&mut store).unwrap();

        // f = w², g = 2 at w = 1.
        let mu1 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.004));
        let mu2 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.008));
        let m = 0.1 * 2.0;
        let v: f64 = 0.001 * 4.0;
        let m_hat = mu2 * m / (1.0 - mu1 * mu2) + (1.0 - mu1) * 2.0 / (1.0 - mu1);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = store.value(store.find("w").unwrap()).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.7);
        store.zero_grads();
        let mut opt = NadamState::new(&store, NadamConfig::default()).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(store.find("w").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn zero_learning_rate_never_moves() {
        let mut store = scalar_store(-1.3);
        let config = NadamConfig {
            lr: 0.0,
            ..NadamConfig::default()
        };
        let mut opt = NadamState::new(&store, config).unwrap();
        for g in [1.0, -4.0, 0.5] {
            set_grad(&mut store, g);
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(store.find("w").unwrap()).data()[0], -1.3);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = scalar_store(0.0);
        let config = NadamConfig {
            lr: 0.05,
            ..NadamConfig::default()
        };
        let mut opt = NadamState::new(&store, config).unwrap();
        for _ in 0..1000 {
            let w = store.value(store.find("w").unwrap()).data()[0];
            set_grad(&mut store, 2.0 * (w - 3.0));
            opt.step(&mut store).unwrap();
        }
        let w = store.value(store.find("w").unwrap()).data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, f64::NAN);
        let mut opt = NadamState::new(&store, NadamConfig::default()).unwrap();
        match opt.step(&mut store) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(store.find("w").unwrap()).data()[0], 1.0);
        assert_eq!(opt.t, 0);
    }
}
