//! The fixed primitive set and per-op attributes.

use std::sync::Arc;

/// Every differentiable operation the tape knows how to execute and reverse.
///
/// The set is closed: layers are compositions of these. `Reshape` and
/// `Transpose2d` are shape plumbing (token grids flatten to row-major node
/// tables and back); everything else carries real math.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Sigmoid,
    MatMul,
    Conv2d,
    AvgPool2d,
    GlobalAvgPool,
    NearestUpsample2d,
    Concat,
    GatherRows,
    ReduceSum,
    ReduceMean,
    MaxStack,
    LayerNorm,
    Reshape,
    Transpose2d,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPool2d => "avg_pool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::NearestUpsample2d => "nearest_upsample2d",
            Primitive::Concat => "concat",
            Primitive::GatherRows => "gather_rows",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::MaxStack => "max_stack",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Reshape => "reshape",
            Primitive::Transpose2d => "transpose2d",
        }
    }
}

/// Static attributes of a recorded op (never differentiated).
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    /// conv2d stride.
    pub stride: usize,
    /// conv2d zero padding.
    pub pad: usize,
    /// avg_pool2d adaptive output size.
    pub out_hw: Option<(usize, usize)>,
    /// nearest_upsample2d integer factor.
    pub factor: usize,
    /// concat / max_stack axis.
    pub axis: usize,
    /// gather_rows index table.
    pub indices: Option<Arc<Vec<usize>>>,
    /// reshape target shape.
    pub shape: Option<Vec<usize>>,
    /// layer_norm variance epsilon.
    pub eps: f64,
}

impl OpAttrs {
    pub fn none() -> Self {
        OpAttrs::default()
    }

    pub fn conv(stride: usize, pad: usize) -> Self {
        OpAttrs {
            stride,
            pad,
            ..OpAttrs::default()
        }
    }

    pub fn pool(oh: usize, ow: usize) -> Self {
        OpAttrs {
            out_hw: Some((oh, ow)),
            ..OpAttrs::default()
        }
    }

    pub fn upsample(factor: usize) -> Self {
        OpAttrs {
            factor,
            ..OpAttrs::default()
        }
    }

    pub fn axis(axis: usize) -> Self {
        OpAttrs {
            axis,
            ..OpAttrs::default()
        }
    }

    pub fn gather(indices: Vec<usize>) -> Self {
        OpAttrs {
            indices: Some(Arc::new(indices)),
            ..OpAttrs::default()
        }
    }

    pub fn reshape(shape: Vec<usize>) -> Self {
        OpAttrs {
            shape: Some(shape),
            ..OpAttrs::default()
        }
    }

    pub fn layer_norm(eps: f64) -> Self {
        OpAttrs {
            eps,
            ..OpAttrs::default()
        }
    }
}
