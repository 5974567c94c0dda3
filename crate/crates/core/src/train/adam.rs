use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ParamGrads, ParamStore};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(t: &Tensor4<T>) -> Self {
        Moments {
            m: Tensor4::zeros(t.shape()),
            v: Tensor4::zeros(t.shape()),
        }
    }

    /// One bias-corrected update of `p` for step number `t` (1-based).
    pub fn update(&mut self, p: &mut Tensor4<T>, g: &Tensor4<T>, lr: f64, t: u64, cfg: &AdamConfig) {
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = 1.0 - cfg.beta1.powf(t as f64);
        let c2 = 1.0 - cfg.beta2.powf(t as f64);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(cfg.eps * c2.sqrt());
        let one = T::one();
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(self.m.data_mut())
            .zip(self.v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Optimizer state for every layer of a store, kernel then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: store
                .named_tensors()
                .into_iter()
                .map(|(_, t)| Moments::zeros_like(t))
                .collect(),
        }
    }

    /// Applies `grads` to every layer that has one. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        if self.moments.len() != 2 * store.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state holds {} tensors, store {}", self.moments.len(), 2 * store.len()),
            ));
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = 2 * id.index();
            let layer = store.layer_mut(id);
            crate::error::ensure_same("adam_step", layer.params.kernel.shape(), g.kernel.shape())?;
            let (mk, rest) = self.moments[i..].split_first_mut().expect("kernel moments");
            mk.update(&mut layer.params.kernel, &g.kernel, lr, t, &cfg);
            rest[0].update(&mut layer.params.bias, &g.bias, lr, t, &cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::full(Shape4::new(1, 1, 1, 1), v)
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = scalar(0.7);
        let mut m = Moments::zeros_like(&p);
        m.update(&mut p, &scalar(0.0), 0.1, 1, &AdamConfig::default());
        assert_eq!(p, scalar(0.7));
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = scalar(0.0);
        let mut m = Moments::zeros_like(&p);
        m.update(&mut p, &scalar(1.0), 0.01, 1, &AdamConfig::default());
        assert!((p.data()[0] + 0.01).abs() < 1e-9, "{}", p.data()[0]);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = scalar(1.0);
        let mut m = Moments::zeros_like(&p);
        for t in 1..=100 {
            let g = scalar(2.0 * p.data()[0]);
            m.update(&mut p, &g, 0.1, t, &AdamConfig::default());
        }
        assert!(p.data()[0].abs() < 0.05, "{}", p.data()[0]);
    }
}
