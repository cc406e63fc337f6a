use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::{Precision, Scalar};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Globally unique identity of a tensor value. Gradients returned by
/// [`crate::Tape::backward`] are keyed by this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// An immutable n-dimensional array. Cloning is cheap (shared buffer).
///
/// A tensor may carry a link to the tape node that produced it; detached
/// tensors (leaves, constants, parameters) have none and are safe to share
/// read-only across threads.
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    /// Index of the producing node on the tape that created this tensor.
    pub(crate) node: Option<usize>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<usize>) -> Self {
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            node,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::from_vec(vec![v; shape.iter().product()], shape)
    }

    /// Leaf parameter: tracked for gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Tensor::from_vec(data, shape).requires_grad(true)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no tape linkage, no gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Fresh tensor with the same shape and new contents.
    pub fn with_values(&self, data: Vec<T>) -> Tensor<T> {
        assert_eq!(data.len(), self.numel());
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            node: None,
        }
    }

    /// Convert precision elementwise (detached).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
            &self.shape,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
