//! Named-parameter traversal shared by the optimizer and checkpointing.
//!
//! Traversal order is fixed by construction, so parameter names enumerate
//! identically on every run and checkpoints are byte-stable.

use iml_tensor::{Scalar, SplitMix64, Tensor};

pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

/// Collect `(name, tensor)` pairs in traversal order; tensors share storage.
pub fn named_params<T: Scalar>(p: &impl Params<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count<T: Scalar>(p: &impl Params<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.numel());
    n
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform init in ±1/sqrt(fan_in), the usual scheme for small nets.
pub fn uniform_init<T: Scalar>(rng: &mut SplitMix64, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::from_f64c(rng.uniform(-bound, bound))).collect()
}
