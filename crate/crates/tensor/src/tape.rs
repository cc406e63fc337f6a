//! The recording tape: forward evaluation with reverse-mode gradients.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::op::{OpAttrs, Primitive};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorId};

struct NodeInput<T> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    tensor_id: TensorId,
    /// Producing node on this tape, if the input is an interior value.
    node: Option<usize>,
    requires_grad: bool,
}

struct Node<T> {
    prim: Primitive,
    attrs: OpAttrs,
    inputs: Vec<NodeInput<T>>,
    out_data: Arc<Vec<T>>,
    out_shape: Vec<usize>,
    out_tensor_id: TensorId,
}

/// Gradients keyed by tensor identity, as returned by [`Tape::backward`].
pub struct GradMap<T: Scalar> {
    grads: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_id(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single-threaded Wengert list. One tape per training step; create with
/// [`Tape::new`] for recording or [`Tape::inference`] for pure evaluation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every op is evaluated and forgotten.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Evaluate `prim` on `inputs` and, if recording and any input tracks
    /// gradients, append a node so the result can be differentiated.
    pub fn record_op(&self, prim: Primitive, inputs: &[&Tensor<T>], attrs: OpAttrs) -> Result<Tensor<T>> {
        let views: Vec<(&[T], &[usize])> = inputs.iter().map(|t| (t.values(), t.shape())).collect();
        let (out_data, out_shape) = kernels::forward(prim, &views, &attrs)?;
        let track = self.recording && inputs.iter().any(|t| t.needs_grad());
        if !track {
            return Ok(Tensor::from_parts(out_data, out_shape, false, None));
        }
        let mut nodes = self.nodes.borrow_mut();
        let node_idx = nodes.len();
        let out = Tensor::from_parts(out_data, out_shape, true, Some(node_idx));
        let node_inputs = inputs
            .iter()
            .map(|t| NodeInput {
                data: t.buffer(),
                shape: t.shape().to_vec(),
                tensor_id: t.id(),
                node: self.interior_node(t, &nodes),
                requires_grad: t.needs_grad(),
            })
            .collect();
        nodes.push(Node {
            prim,
            attrs,
            inputs: node_inputs,
            out_data: out.buffer(),
            out_shape: out.shape().to_vec(),
            out_tensor_id: out.id(),
        });
        Ok(out)
    }

    /// An input's node link is honored only if it points at a node of *this*
    /// tape that actually produced it; tensors from other tapes are leaves.
    fn interior_node(&self, t: &Tensor<T>, nodes: &[Node<T>]) -> Option<usize> {
        match t.node {
            Some(i) if i < nodes.len() && nodes[i].out_tensor_id == t.id() => Some(i),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar root. Returns gradients for every tensor
    /// that tracks gradients and influenced the root (leaves and interiors);
    /// tensors with `requires_grad == false` receive no entry.
    pub fn backward(&self, root: &Tensor<T>) -> Result<GradMap<T>> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let root_node = match root.node {
            Some(i) if i < nodes.len() && nodes[i].out_tensor_id == root.id() => i,
            _ => return Err(TensorError::RootNotOnTape),
        };

        let mut node_grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        node_grads[root_node] = Some(vec![T::one()]);
        let mut leaf_grads: HashMap<TensorId, Vec<T>> = HashMap::new();

        for i in (0..=root_node).rev() {
            let Some(out_grad) = node_grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let views: Vec<(&[T], &[usize])> = node
                .inputs
                .iter()
                .map(|inp| (inp.data.as_slice(), inp.shape.as_slice()))
                .collect();
            let grads = kernels::input_grads(
                node.prim,
                &views,
                (node.out_data.as_slice(), node.out_shape.as_slice()),
                &out_grad,
                &node.attrs,
            )?;
            for (inp, g) in node.inputs.iter().zip(grads) {
                if !inp.requires_grad {
                    continue;
                }
                match inp.node {
                    Some(j) => match &mut node_grads[j] {
                        Some(acc) => {
                            for (av, gv) in acc.iter_mut().zip(&g) {
                                *av += *gv;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    },
                    None => {
                        let acc = leaf_grads
                            .entry(inp.tensor_id)
                            .or_insert_with(|| vec![T::zero(); g.len()]);
                        for (av, gv) in acc.iter_mut().zip(&g) {
                            *av += *gv;
                        }
                    }
                }
            }
            // Interior tensors also get an entry, keyed by their tensor id.
            leaf_grads.insert(node.out_tensor_id, out_grad);
        }

        Ok(GradMap { grads: leaf_grads })
    }

    /// Re-execute every node from its saved inputs and compare with the
    /// stored output. True iff all outputs reproduce bit-exactly.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            let views: Vec<(&[T], &[usize])> = node
                .inputs
                .iter()
                .map(|inp| (inp.data.as_slice(), inp.shape.as_slice()))
                .collect();
            let (data, shape) = kernels::forward(node.prim, &views, &node.attrs)?;
            if shape != node.out_shape {
                return Ok(false);
            }
            let same = data
                .iter()
                .zip(node.out_data.iter())
                .all(|(a, b)| a.to_f64c().to_bits() == b.to_f64c().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // ── op wrappers ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Add, &[a, b], OpAttrs::none())
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Sub, &[a, b], OpAttrs::none())
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Mul, &[a, b], OpAttrs::none())
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Div, &[a, b], OpAttrs::none())
    }

    pub fn neg(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Neg, &[a], OpAttrs::none())
    }

    pub fn exp(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Exp, &[a], OpAttrs::none())
    }

    pub fn log(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Log, &[a], OpAttrs::none())
    }

    pub fn sqrt(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Sqrt, &[a], OpAttrs::none())
    }

    pub fn relu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Relu, &[a], OpAttrs::none())
    }

    pub fn sigmoid(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Sigmoid, &[a], OpAttrs::none())
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::MatMul, &[a, b], OpAttrs::none())
    }

    pub fn conv2d(&self, x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        self.record_op(Primitive::Conv2d, &[x, kernel], OpAttrs::conv(stride, pad))
    }

    /// Adaptive average pooling to an explicit output size.
    pub fn avg_pool2d(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        self.record_op(Primitive::AvgPool2d, &[x], OpAttrs::pool(oh, ow))
    }

    pub fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::GlobalAvgPool, &[x], OpAttrs::none())
    }

    pub fn nearest_upsample2d(&self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        self.record_op(Primitive::NearestUpsample2d, &[x], OpAttrs::upsample(factor))
    }

    pub fn concat(&self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        self.record_op(Primitive::Concat, xs, OpAttrs::axis(axis))
    }

    pub fn gather_rows(&self, x: &Tensor<T>, indices: Vec<usize>) -> Result<Tensor<T>> {
        self.record_op(Primitive::GatherRows, &[x], OpAttrs::gather(indices))
    }

    pub fn reduce_sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::ReduceSum, &[x], OpAttrs::none())
    }

    pub fn reduce_mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::ReduceMean, &[x], OpAttrs::none())
    }

    /// Elementwise max over one axis; ties route to the lowest index.
    pub fn max_stack(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        self.record_op(Primitive::MaxStack, &[x], OpAttrs::axis(axis))
    }

    pub fn layer_norm(&self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        self.record_op(Primitive::LayerNorm, &[x, gamma, beta], OpAttrs::layer_norm(eps))
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.record_op(Primitive::Reshape, &[x], OpAttrs::reshape(shape.to_vec()))
    }

    pub fn transpose2d(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record_op(Primitive::Transpose2d, &[x], OpAttrs::none())
    }

    // ── composite conveniences (still built from primitives) ────────

    pub fn add_scalar(&self, a: &Tensor<T>, v: f64) -> Result<Tensor<T>> {
        self.add(a, &Tensor::scalar(T::from_f64c(v)))
    }

    pub fn mul_scalar(&self, a: &Tensor<T>, v: f64) -> Result<Tensor<T>> {
        self.mul(a, &Tensor::scalar(T::from_f64c(v)))
    }

    /// x · W + b with `x (m,k)`, `w (k,n)`, `b (n)`.
    pub fn linear(&self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.matmul(x, w)?;
        self.add(&y, b)
    }

    /// softplus(x) = ln(1 + e^x), used to keep timescales positive.
    pub fn softplus(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.exp(x)?;
        let one = Tensor::full(x.shape(), T::one());
        self.log(&self.add(&e, &one)?)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}
