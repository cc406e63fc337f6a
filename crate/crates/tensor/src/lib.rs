//! A minimal differentiable tensor engine.
//!
//! Fixed primitive set, forward evaluation onto a recording tape,
//! reverse-mode gradient propagation, and a finite-difference checker.
//! Training runs in `f32`; every verification oracle runs in `f64`.

mod error;
mod gradcheck;
pub mod kernels;
mod op;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_components, grad_check_sampled, GradCheckReport};
pub use op::{OpAttrs, Primitive};
pub use rng::SplitMix64;
pub use scalar::{Precision, Scalar};
pub use tape::{GradMap, Tape};
pub use tensor::{Tensor, TensorId};
