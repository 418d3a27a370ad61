//! AdamW and the warmup plus cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::config::TrainConfig;
use crate::param::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`:
    /// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * theta[i]);
            }
        }
    }
}

/// Learning rate at a (possibly fractional) epoch: linear warmup from 0 to
/// `cfg.lr` over `warmup_epochs`, then half-cosine decay to 0 at `epochs`.
pub fn cosine_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    let total = cfg.epochs as f64;
    if epoch < warm {
        return cfg.lr * epoch / warm;
    }
    let span = (total - warm).max(f64::MIN_POSITIVE);
    let progress = ((epoch - warm) / span).clamp(0.0, 1.0);
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales the gradients in `store` so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::vector(vec![theta]));
        s.get_mut(id).grad = Tensor::vector(vec![grad]);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut s = scalar_store(1.7, 0.0);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..5 {
            opt.step(&mut s, 0.1);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(2.0, 1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.1);
        let th = s.iter().next().unwrap().value.data()[0];
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((th - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = scalar_store(3.0, 0.0);
        let mut opt = AdamW::new(&s, 0.05);
        opt.step(&mut s, 0.1);
        let th = s.iter().next().unwrap().value.data()[0];
        assert!((th - 3.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 20,
            warmup_epochs: 4,
            ..Default::default()
        };
        assert_eq!(cosine_schedule(0.0, &cfg), 0.0);
        assert!((cosine_schedule(2.0, &cfg) - 5e-4).abs() < 1e-18);
        assert!((cosine_schedule(4.0, &cfg) - 1e-3).abs() < 1e-18);
        assert!((cosine_schedule(12.0, &cfg) - 5e-4).abs() < 1e-15);
        assert!(cosine_schedule(19.999, &cfg) < 1e-9);
        let mut prev = f64::INFINITY;
        for e in 40..200 {
            let lr = cosine_schedule(e as f64 / 10.0, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        let no_warm = TrainConfig {
            warmup_epochs: 0,
            ..cfg
        };
        assert_eq!(cosine_schedule(0.0, &no_warm), 1e-3);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut s = ParamStore::new();
        let id = s.add("a", Tensor::vector(vec![0.0, 0.0]));
        s.get_mut(id).grad = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.get(id).grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut s, 10.0), 1.0);
    }
}
