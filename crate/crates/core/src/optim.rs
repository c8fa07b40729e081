//! Adam with optional global-norm gradient clipping.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of the parameters in `ids`; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, ids: &[ParamId], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for &id in ids {
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for i in 0..p.len() {
                let gi = g.map(|g| g.data()[i].as_f64()).unwrap_or(0.0);
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p[i] = T::lit(p[i].as_f64() - update);
            }
        }
    }
}

/// Rescales `grads` so their norm over `ids` is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grads.norm(Some(ids));
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}
