//! AdamW with decoupled weight decay over a slot-aligned tensor collection.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use serde::{Deserialize, Serialize};

/// Anything that exposes its trainable tensors in a fixed slot order.
/// Slot order is part of the contract: gradients, optimizer moments and the
/// finite-difference checker all index by it.
pub trait ParamTensors {
    fn tensor_names(&self) -> Vec<&'static str>;
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new<P: ParamTensors>(
        params: &P,
        learning_rate: f64,
        weight_decay: f64,
    ) -> OptimizerState {
        let shapes: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        OptimizerState {
            first_moment: shapes.clone(),
            second_moment: shapes,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay adaptive update with bias-corrected moments.
/// `grads` must be slot-aligned with `params`.
pub fn adamw_step<P: ParamTensors>(
    params: &mut P,
    grads: &[Matrix],
    state: &mut OptimizerState,
) -> Result<()> {
    let names = params.tensor_names();
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.first_moment.len() != tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "adamw_step: {} tensors, {} grads, {} moment slots",
            tensors.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (slot, t) in tensors.iter().enumerate() {
        if t.rows() != grads[slot].rows() || t.cols() != grads[slot].cols() {
            return Err(Error::InvalidArgument(format!(
                "adamw_step: gradient shape mismatch for {}",
                names[slot]
            )));
        }
        if state.first_moment[slot].rows() != t.rows()
            || state.first_moment[slot].cols() != t.cols()
        {
            return Err(Error::InvalidArgument(format!(
                "adamw_step: moment shape mismatch for {}",
                names[slot]
            )));
        }
        grads[slot].check_finite(names[slot])?;
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;

    for (slot, tensor) in tensors.iter_mut().enumerate() {
        let g = grads[slot].data();
        let m = state.first_moment[slot].data_mut();
        let v = state.second_moment[slot].data_mut();
        let w = tensor.data_mut();
        for i in 0..w.len() {
            // Decoupled decay applies to the parameter directly, not the
            // gradient.
            w[i] -= lr * state.weight_decay * w[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        tensor.check_finite(names[slot])?;
    }
    Ok(())
}
