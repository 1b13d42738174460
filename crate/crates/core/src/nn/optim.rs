use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            Self::Sgd { .. } => Self::Sgd { lr },
            Self::Adam { beta1, beta2, eps, .. } => Self::Adam { lr, beta1, beta2, eps },
        }
    }

    /// Applies one update to every trainable parameter from its accumulated gradient.
    /// Gradients are left untouched.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut().filter(|p| p.trainable) {
            match *self {
                Self::Sgd { lr } => {
                    let lr = T::of(lr);
                    p.value.data_mut().iter_mut().zip(&p.grad).for_each(|(w, &g)| *w -= lr * g);
                }
                Self::Adam { lr, beta1, beta2, eps } => {
                    let n = p.grad.len();
                    if p.first_moment.len() != n {
                        p.first_moment = vec![T::zero(); n];
                        p.second_moment = vec![T::zero(); n];
                    }
                    p.steps += 1;
                    let t = p.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let (lr_t, eps) = (T::of(lr / c1), T::of(eps));
                    let c2s = T::of(c2.sqrt());
                    let data = p.value.data_mut();
                    for i in 0..n {
                        let g = p.grad[i];
                        let m = b1 * p.first_moment[i] + (T::one() - b1) * g;
                        let v = b2 * p.second_moment[i] + (T::one() - b2) * g * g;
                        p.first_moment[i] = m;
                        p.second_moment[i] = v;
                        data[i] -= lr_t * m / (v.sqrt() / c2s + eps);
                    }
                }
            }
        }
    }
}

/// Scales all trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
