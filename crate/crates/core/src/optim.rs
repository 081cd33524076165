//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let n = store.len();
        Adam {
            config,
            step: 0,
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step as usize,
                loss: norm,
            });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if !store.get(id).trainable {
                continue;
            }
            let value = store.value_mut(id);
            if g.shape() != value.shape() {
                return Err(Error::shape("adam", g.shape(), value.shape()));
            }
            let n = g.numel();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if m.is_empty() {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
            for ((w, &gi), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gi = gi * scale;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![x]));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g/|g| (up to eps).
        let (mut s, id) = one_param(1.0);
        let mut adam = Adam::new(&s, AdamConfig { clip_norm: None, ..Default::default() });
        adam.step(&mut s, &[Some(Tensor::vector(vec![0.3]))]).unwrap();
        assert!((s.value(id).data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn minimizes_quadratic() {
        let (mut s, id) = one_param(3.0);
        let mut adam = Adam::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = s.value(id).data()[0];
            adam.step(&mut s, &[Some(Tensor::vector(vec![2.0 * x]))]).unwrap();
        }
        assert!(s.value(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_and_missing_are_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0]));
        s.set_trainable_prefix("a", false);
        let b = s.add("b", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, &[Some(Tensor::vector(vec![1.0])), None]).unwrap();
        assert_eq!(s.value(a).data(), [1.0]);
        assert_eq!(s.value(b).data(), [1.0]);
    }

    #[test]
    fn clipping_matches_scaled_gradient() {
        // Adam is invariant to a constant gradient scale on step one, so
        // check the clipped moments through a second, unclipped step.
        let (mut s1, id1) = one_param(0.0);
        let (mut s2, id2) = one_param(0.0);
        let mut clipped = Adam::new(&s1, AdamConfig { clip_norm: Some(1.0), ..Default::default() });
        let mut manual = Adam::new(&s2, AdamConfig { clip_norm: None, ..Default::default() });
        let n = clipped.step(&mut s1, &[Some(Tensor::vector(vec![10.0]))]).unwrap();
        assert_eq!(n, 10.0);
        manual.step(&mut s2, &[Some(Tensor::vector(vec![1.0]))]).unwrap();
        clipped.step(&mut s1, &[Some(Tensor::vector(vec![-0.5]))]).unwrap();
        manual.step(&mut s2, &[Some(Tensor::vector(vec![-0.5]))]).unwrap();
        assert!((s1.value(id1).data()[0] - s2.value(id2).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let (mut s, _) = one_param(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let r = adam.step(&mut s, &[Some(Tensor::vector(vec![f64::NAN]))]);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }
}
