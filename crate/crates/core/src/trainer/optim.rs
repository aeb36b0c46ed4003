//! Adaptive-moment optimizer with decoupled weight decay and optional
//! cosine learning-rate decay.

use crate::config::TrainConfig;
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

pub struct AdamW<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, e)| Tensor::zeros(e.tensor.shape())).collect();
        let v = store.iter().map(|(_, e)| Tensor::zeros(e.tensor.shape())).collect();
        AdamW { m, v, step: 0 }
    }

    /// Cosine-decayed learning rate for step `t` of `total`.
    pub fn lr_at(cfg: &TrainConfig, t: usize, total: usize) -> f64 {
        if !cfg.cosine_decay || total == 0 {
            return cfg.lr;
        }
        let progress = t as f64 / total as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// One update over all trainable parameters that received gradients.
    /// Gradients are in registry order; update order is fixed.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Tensor<S>>],
        cfg: &TrainConfig,
        lr: f64,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient/registry shape mismatch");
        self.step += 1;
        let b1 = S::of(cfg.beta1);
        let b2 = S::of(cfg.beta2);
        let eps = S::of(cfg.eps);
        let lr_s = S::of(lr);
        let wd = S::of(cfg.weight_decay);
        let bias1 = S::one() - S::of(cfg.beta1.powi(self.step as i32));
        let bias2 = S::one() - S::of(cfg.beta2.powi(self.step as i32));
        let ids: Vec<crate::params::ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let entry = store.get(id);
            if !entry.trainable {
                continue;
            }
            let Some(grad) = grads[id.0].as_ref() else { continue };
            assert_eq!(grad.shape(), entry.tensor.shape(), "gradient shape for {}", entry.name);
            let decay = entry.decay;
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let g = grad.data();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            }
            let p = store.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] = p[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
                if decay {
                    p[i] = p[i] - lr_s * wd * p[i];
                }
            }
        }
    }
}
