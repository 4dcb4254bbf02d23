//! Stochastic gradient descent over a [`ParamStore`] with optional
//! momentum, plus batch-gradient scaling.

use indexmap::IndexMap;

use crate::num::ParamStore;

/// Gradient clipping threshold on the global L2 norm.
pub const CLIP_NORM: f64 = 5.0;

/// Plain SGD when `momentum` is 0, otherwise heavy-ball updates
/// `v <- momentum * v + g`, `theta <- theta - lr * v`. Velocities are
/// keyed by parameter name and created on first use.
pub struct Sgd {
    momentum: f64,
    velocity: IndexMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: IndexMap::new(),
        }
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Parameters without a gradient (frozen, or unreached
    /// this step) are left alone.
    pub fn apply(&mut self, store: &mut ParamStore, lr: f64) {
        for (name, t) in store.iter_mut() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for (vi, gi) in v.iter_mut().zip(&grad) {
                    *vi = self.momentum * *vi + gi;
                }
                for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                    *p -= lr * vi;
                }
            } else {
                for (p, gi) in t.data_mut().iter_mut().zip(&grad) {
                    *p -= lr * gi;
                }
            }
        }
    }
}

/// Scale every stored gradient in place (batch averaging).
pub fn scale_grads(store: &mut ParamStore, factor: f64) {
    for (_, t) in store.iter_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
