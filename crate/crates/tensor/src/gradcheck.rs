//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub components: usize,
}

/// Relative error with the conventional floor denominator.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of `f` at `point` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, componentwise over the selected
/// component indices. Runs in double precision by construction.
pub fn grad_check_components<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    rel_tol: f64,
    components: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let leaf = point.detach().requires_grad(true);
    let tape = Tape::new();
    let out = f(&tape, &leaf)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarOutput(out.shape().to_vec()));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<f64> = match grads.get(&leaf) {
        Some(g) => g.to_vec(),
        // Output does not depend on the point; the true gradient is zero.
        None => vec![0.0; point.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tape::inference();
        let x = Tensor::from_vec(data, point.shape());
        let y = f(&t, &x)?;
        if y.numel() != 1 {
            return Err(TensorError::NonScalarOutput(y.shape().to_vec()));
        }
        Ok(y.item())
    };

    let mut max_rel = 0.0f64;
    for &i in components {
        let mut plus = point.values().to_vec();
        plus[i] += step;
        let mut minus = point.values().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let e = rel_err(analytic[i], numeric);
        if e > max_rel {
            max_rel = e;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel < rel_tol,
        components: components.len(),
    })
}

/// Check every component of `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_components(f, point, step, rel_tol, &all)
}

/// Check an evenly strided subset of at most `max_components` components;
/// used for large tensors where the full sweep is wasteful.
pub fn grad_check_sampled<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    rel_tol: f64,
    max_components: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let n = point.numel();
    let take = max_components.max(1).min(n);
    let stride = n.div_ceil(take);
    let comps: Vec<usize> = (0..n).step_by(stride).collect();
    grad_check_components(f, point, step, rel_tol, &comps)
}
