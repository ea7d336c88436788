//! AdamW with decoupled weight decay, warmup-cosine schedule and global-norm clipping.

use std::sync::Arc;

use crate::diffcore::{ParamStore, Tensor};

use super::config::Config;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &Config) -> Self {
        Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: cfg.weight_decay }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Updates applied so far (bias-correction exponent).
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// Linear warmup to `lr`, then cosine decay to `min_ratio * lr` at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Rescales all gradients so their global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store.iter().map(|(_, p)| p.grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / (norm + 1e-6)) as f32;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// One AdamW update with learning rate `lr`. Weight decay applies to matrices and
/// kernels only (rank >= 2), not to biases and norm gains.
pub fn adamw_step(store: &mut ParamStore<f32>, state: &mut AdamState, opt: &AdamW, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.value.ndim() >= 2 { opt.weight_decay } else { 0.0 };
        let value = Arc::make_mut(&mut p.value);
        for (((w, &g), m), v) in value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g as f64;
            let mn = opt.beta1 * *m as f64 + (1.0 - opt.beta1) * g;
            let vn = opt.beta2 * *v as f64 + (1.0 - opt.beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let upd = (mn / bc1) / ((vn / bc2).sqrt() + opt.eps);
            *w = (*w as f64 * (1.0 - lr * decay) - lr * upd) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 100, 1.0, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, 1.0, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(10, 100, 1.0, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(100, 100, 1.0, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!(lr_at(50, 100, 1.0, 10, 0.1) < lr_at(40, 100, 1.0, 10, 0.1));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::zeros(&[3])).unwrap();
        s.get_mut(a).grad = Tensor::new(&[3], vec![30.0, 40.0, 0.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 4.0), 50.0);
        let n = s.get(a).grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        assert!(n <= 4.0 + 1e-5);
    }

    #[test]
    fn adam_moves_against_gradient_and_decays_matrices() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        let b = s.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut st = AdamState::new(&s);
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.5 };
        adamw_step(&mut s, &mut st, &opt, 0.1);
        // zero gradient: only the decay acts, and only on the matrix
        assert!((s.value(w).data()[0] - 0.95).abs() < 1e-6);
        assert_eq!(s.value(b).data()[0], 1.0);
        s.get_mut(b).grad = Tensor::full(&[2], 2.0);
        adamw_step(&mut s, &mut st, &opt, 0.1);
        assert!(s.value(b).data()[0] < 1.0);
        assert_eq!(st.t, 2);
    }
}
