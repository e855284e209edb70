//! Adam with linear warmup followed by inverse-square-root decay.

use sapf_core::params::ParamId;
use sapf_core::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, warmup: usize) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.rows(), p.tensor.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Learning rate at (1-based) step `t`: peak `lr` reached at the end of
    /// warmup, then decaying as `1/√t`.
    pub fn rate_at(&self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as f64;
        self.lr * (t / w).min((w / t).sqrt())
    }

    /// Applies one update; `grads` may omit parameters without gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> f64 {
        self.step += 1;
        let lr = self.rate_at(self.step);
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(*id);
            for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        lr
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
