//! Adam with bias correction and the warmup/decay learning-rate schedule.

use thiserror::Error;

use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Piecewise learning rate over fractional epochs: linear warmup from 1e-5
/// at epoch 0 to 1e-3 at epoch 2, constant until epoch 6, then decade decays
/// at epochs 6 and 7.
pub fn lr_schedule(epoch: f64) -> f64 {
    assert!(epoch >= 0.0, "epoch must be non-negative");
    if epoch < 2.0 {
        1e-5 + (1e-3 - 1e-5) * (epoch / 2.0)
    } else if epoch < 6.0 {
        1e-3
    } else if epoch < 7.0 {
        1e-4
    } else {
        1e-5
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = params.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every parameter. Gradients are checked
    /// finite before anything is mutated.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), OptimError> {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        assert!(lr > 0.0, "learning rate must be positive");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    param: params.params()[i].name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let vals = params.values_mut(i);
            for ((mv, vv), (x, &g)) in
                m.iter_mut().zip(v.iter_mut()).zip(vals.iter_mut().zip(&grads[i]))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
