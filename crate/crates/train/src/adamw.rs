//! Decoupled-weight-decay Adam with the solver's default momenta.

use std::collections::HashMap;

use iml_net::Params;
use iml_tensor::{Scalar, Tensor};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps; bias correction uses `step` after increment.
    pub step: u64,
    /// First/second moments per parameter name.
    pub moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

/// One optimizer step over every parameter of `model`. Parameters without a
/// gradient entry step with g = 0 (weight decay still applies). The caller
/// re-projects constrained parameters afterwards.
pub fn adamw_step<T: Scalar, M: Params<T>>(
    model: &mut M,
    grads: &HashMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    // Validate gradients up front so a poisoned step never half-applies.
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64c(state.lr);
    let wd = T::from_f64c(state.weight_decay);
    let b1 = T::from_f64c(state.beta1);
    let b2 = T::from_f64c(state.beta2);
    let eps = T::from_f64c(state.eps);
    let bias1 = T::from_f64c(1.0 - state.beta1.powi(t));
    let bias2 = T::from_f64c(1.0 - state.beta2.powi(t));
    let one = T::one();

    let mut failure = None;
    model.visit_mut("", &mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let n = tensor.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        if m.len() != n {
            failure = Some(TrainError::TensorShape {
                name: name.to_string(),
                expected: vec![m.len()],
                got: vec![n],
            });
            return;
        }
        let zero_grad: Vec<T>;
        let g = match grads.get(name) {
            Some(g) => g.as_slice(),
            None => {
                zero_grad = vec![T::zero(); n];
                &zero_grad
            }
        };
        let mut data = tensor.values().to_vec();
        for i in 0..n {
            // Decoupled decay first, then the bias-corrected moment update.
            data[i] = data[i] - lr * wd * data[i];
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *tensor = tensor.with_values(data).requires_grad(true);
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Build the name → gradient table for one backward pass.
pub fn collect_grads<T: Scalar>(
    named: &[(String, Tensor<T>)],
    grads: &iml_tensor::GradMap<T>,
) -> HashMap<String, Vec<T>> {
    let mut out = HashMap::new();
    for (name, tensor) in named {
        if let Some(g) = grads.get(tensor) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}
