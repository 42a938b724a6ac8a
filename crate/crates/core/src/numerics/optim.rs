//! Adam and AdamW.
//!
//! ```text
//! θ ← θ · (1 − lr·λ)                (decoupled decay, AdamW only)
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! θ ← θ − lr · m̂ / (√v̂ + ε)       m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        Self {
            weight_decay: 1e-2,
            ..Self::adam(lr)
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    /// One update over every parameter, then zeroes the gradients.
    pub fn step<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let t = store.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let decay = S::of(1.0 - self.lr * self.weight_decay);
        let (step_size, eps) = (S::of(self.lr / bc1), S::of(self.eps));
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());

        let (values, grads, moments) = store.split_for_update();
        if let Some(name) = values.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::State(format!("missing gradient slot for '{name}'")));
        }
        for (name, value) in values.iter_mut() {
            let grad = &grads[name];
            let (m, v) = moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(value.dims()), Tensor::zeros(value.dims())));
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *p = *p * decay - step_size * *mi / denom;
            }
        }
        store.step = t;
        store.zero_grads();
        Ok(())
    }
}
