//! First-order optimizers (descent orientation) and gradient-norm clipping.

use super::Tensor;
use crate::error::{Error, Result};

/// Adam state: per-parameter first/second moment buffers plus the shared
/// hyperparameters and step counter. Moment buffers are allocated on the
/// first step and keyed by position in the parameter list, so callers must
/// pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn check_grad(name: &str, grad: Option<&[f64]>) -> Result<()> {
    let g = grad.ok_or_else(|| Error::InvalidArgument {
        op: "optimizer",
        reason: format!("parameter {name} has no gradient buffer"),
    })?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of parameter {name}"),
        });
    }
    Ok(())
}

/// One Adam update over all parameters:
/// `θ ← θ − α · m̂ / (√v̂ + ε)` with bias-corrected moments.
pub fn adam_step(params: &mut [(&str, &mut Tensor)], state: &mut AdamState) -> Result<()> {
    if state.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "adam_step",
            reason: format!("learning_rate must be positive, got {}", state.learning_rate),
        });
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::InvalidArgument {
            op: "adam_step",
            reason: format!(
                "parameter count changed: {} vs {}",
                params.len(),
                state.first_moment.len()
            ),
        });
    }
    for (name, p) in params.iter() {
        check_grad(name, p.grad())?;
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (idx, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let grad = p.grad().unwrap().to_vec();
        let theta = p.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Plain gradient descent: `θ ← θ − α·g`.
pub fn sgd_step(params: &mut [(&str, &mut Tensor)], learning_rate: f64) -> Result<()> {
    for (name, p) in params.iter() {
        check_grad(name, p.grad())?;
    }
    for (_, p) in params.iter_mut() {
        let grad = p.grad().unwrap().to_vec();
        for (theta, g) in p.data_mut().iter_mut().zip(grad) {
            *theta -= learning_rate * g;
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients, summed in parameter-list order.
pub fn global_grad_norm(params: &[(&str, &mut Tensor)]) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

/// Rescales all gradients so the global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [(&str, &mut Tensor)], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            for g in p.grad_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
