//! Bias-corrected Adam.

use crate::params::ParamStore;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; parameters and moments untouched.
    SkippedNonFinite,
}

/// Moment buffers, kept in 64-bit regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<StepOutcome> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            });
        }
        for (p, g) in params.tensors().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv = T::of(pv.f64() - lr * mh / (vh.sqrt() + eps));
            }
        }
        Ok(StepOutcome::Applied)
    }
}
