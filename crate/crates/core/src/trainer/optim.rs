use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
            clip_max_norm: 1.0,
            epochs: 129,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl OptimConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.clip_max_norm > 0.0) {
            return fail(format!("clip_max_norm {} must be positive", self.clip_max_norm));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return fail("eps and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        Ok(())
    }
}

/// AdamW moment buffers, one pair per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Global L2 norm over every gradient.
pub fn grad_norm<T: Element>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_grad_norm<T: Element>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for (_, p) in params.iter_mut() {
        for g in p.grad.data_mut() {
            *g = T::from_f64(g.to_f64_lossy() * scale);
        }
    }
    scale
}

/// One decoupled AdamW step:
/// `w ← w·(1 − lr·λ) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step<T: Element>(params: &mut ParamStore<T>, state: &mut OptimState, cfg: &OptimConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let n = p.value.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            let g = g.to_f64_lossy();
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w = T::from_f64(w.to_f64_lossy() * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn store(values: &[(&str, Vec<f64>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, w, g) in values {
            s.insert(*name, Tensor::new(&[w.len()], w.clone()).unwrap()).unwrap();
            s.accumulate_grad(name, &Tensor::new(&[g.len()], g.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn three_four_five_clip() {
        let mut s = store(&[("a", vec![0.0], vec![3.0]), ("b", vec![0.0], vec![4.0])]);
        let scale = clip_grad_norm(&mut s, 1.0);
        assert!((scale - 0.2).abs() < 1e-15);
        assert!((s.grad("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((s.grad("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn small_norm_left_alone() {
        let mut s = store(&[("a", vec![0.0, 0.0], vec![0.3, 0.4])]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 1.0);
        assert_eq!(s.grad("a").unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn many_tensor_clip_matches_flattened_norm() {
        let grads: Vec<Vec<f64>> = (0..5).map(|k| (0..7).map(|i| ((k * 7 + i) as f64).sin() * 3.0).collect()).collect();
        let flat: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let names = ["a", "b", "c", "d", "e"];
        let entries: Vec<_> = names.iter().zip(&grads).map(|(n, g)| (*n, vec![0.0; 7], g.clone())).collect();
        let mut s = store(&entries);
        let scale = clip_grad_norm(&mut s, 2.0);
        assert!((scale - 2.0 / flat).abs() < 1e-15);
        for (n, g) in names.iter().zip(&grads) {
            for (a, b) in s.grad(n).unwrap().data().iter().zip(g) {
                assert!((a - b * 2.0 / flat).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let cfg = OptimConfig {
            weight_decay: 0.5,
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut s = store(&[("w", vec![2.0, -3.0], vec![0.0, 0.0])]);
        adamw_step(&mut s, &mut OptimState::new(), &cfg);
        assert_eq!(s.get("w").unwrap().data(), &[2.0 * (1.0 - 0.05), -3.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = OptimConfig::default();
        let w0 = 0.7;
        let mut s = store(&[("w", vec![w0], vec![1.0])]);
        adamw_step(&mut s, &mut OptimState::new(), &cfg);
        let expected = w0 - cfg.lr / (1.0 + cfg.eps) - cfg.lr * cfg.weight_decay * w0;
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    /// Scalar Adam recurrence written out step by step.
    fn reference_trajectory(w0: f64, grads: &[f64], cfg: &OptimConfig) -> Vec<f64> {
        let (mut m, mut v, mut w) = (0.0, 0.0, w0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w = w - cfg.lr * mh / (vh.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * w;
            out.push(w);
        }
        out
    }

    #[test]
    fn three_step_trajectory_matches_reference() {
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let grads = [0.5, -1.5, 2.0];
        let reference = reference_trajectory(1.0, &grads, &cfg);
        let mut s = store(&[("w", vec![1.0], vec![0.0])]);
        let mut state = OptimState::new();
        for (g, r) in grads.iter().zip(&reference) {
            s.zero_grad();
            s.accumulate_grad("w", &Tensor::new(&[1], vec![*g]).unwrap()).unwrap();
            adamw_step(&mut s, &mut state, &cfg);
            assert!((s.get("w").unwrap().data()[0] - r).abs() < 1e-14);
        }
        assert_eq!(state.t, 3);
    }

    #[test]
    fn no_decay_is_plain_adam() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let grads = [1.0, 0.25, -0.5, 2.0];
        let reference = reference_trajectory(-0.4, &grads, &cfg);
        let mut s = store(&[("w", vec![-0.4], vec![0.0])]);
        let mut state = OptimState::new();
        for (g, r) in grads.iter().zip(&reference) {
            s.zero_grad();
            s.accumulate_grad("w", &Tensor::new(&[1], vec![*g]).unwrap()).unwrap();
            adamw_step(&mut s, &mut state, &cfg);
            assert_eq!(s.get("w").unwrap().data()[0], *r);
        }
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let cfg = OptimConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = store(&[("w", vec![1.5, -2.0], vec![0.3, 7.0])]);
        adamw_step(&mut s, &mut OptimState::new(), &cfg);
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { lr: 0.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { beta2: 1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { clip_max_norm: 0.0, ..OptimConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            grads in prop::collection::vec(-100.0f64..100.0, 1..40),
            max_norm in 0.01f64..10.0,
        ) {
            let mut s = store(&[("g", vec![0.0; grads.len()], grads)]);
            clip_grad_norm(&mut s, max_norm);
            prop_assert!(grad_norm(&s) <= max_norm * (1.0 + 1e-6));
        }
    }
}
