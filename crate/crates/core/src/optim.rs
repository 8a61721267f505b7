//! Adam with global gradient-norm clipping and a cosine learning-rate decay.

use crate::nn::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |_: usize| -> Vec<Tensor> {
            params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect()
        };
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(0), v: zeros(1) }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient still advance their
    /// moment estimates with a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.grads[i].as_ref();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.by_index_mut(i);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.data_mut()[k] -= update;
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f32, step: u64, total: u64) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get("x").unwrap().map(|v| 2.0 * v);
            opt.update(&mut store, &ParamGrads { grads: vec![Some(g)] }, 0.01);
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_and_schedule() {
        let mut g = ParamGrads { grads: vec![Some(Tensor::row(vec![3.0, 4.0]))] };
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-9);
        assert!((g.norm() - 1.0).abs() < 1e-6);
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-9);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-12);
    }
}
