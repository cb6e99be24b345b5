//! Adam optimiser with decoupled-style L2 weight decay folded into the
//! gradient (classic L2 regularisation).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;

/// Adam state for one parameter set.
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Array2::zeros(params.value(i).dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Array2::zeros(params.value(i).dim()))
            .collect();
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update from per-slot gradients (None = no gradient this
    /// step).  Rejects non-finite gradients so a diverging run fails loudly.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array2<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {}",
                    params.name(idx)
                )));
            }
            let g = grad + &(params.value(idx) * self.weight_decay);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let update = &m_hat / &(v_hat.mapv(f64::sqrt) + self.eps);
            *params.value_mut(idx) -= &(update * self.lr);
        }
        Ok(())
    }
}
