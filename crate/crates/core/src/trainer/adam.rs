//! Per-parameter first/second-moment optimizer state for one parameter
//! set, stepped with an externally supplied learning-rate factor.

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new_like(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One update over all parameters in the set. `grads` must be
    /// parallel to the set's declaration order. Rejects non-finite
    /// gradients without touching the weights.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradient groups for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for i in 0..params.len() {
            let p = params.get_mut(i);
            for ((w, g), (m, v)) in p
                .data
                .iter_mut()
                .zip(&grads[i])
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
