//! Differentiable operations recorded on the [`Tape`](crate::Tape).

mod conv;
mod dropout;
mod elementwise;
mod linear;
mod shape;
mod softmax;

pub use conv::{conv_output_extent, ConvGeometry, ConvOptions, Padding};
pub use elementwise::Activation;

use crate::scalar::Scalar;
use crate::tape::{Node, Var};

pub(crate) enum Op<F> {
    Leaf,
    /// Output of an operation none of whose inputs needs a gradient.
    Constant(&'static str),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    /// `x` with a per-channel vector added along axis 1.
    AddChannel { x: Var, bias: Var },
    /// `x` scaled by a per-channel vector along axis 1.
    MulChannel { x: Var, weight: Var },
    /// `x[N,C,..]` scaled by `mask[N,1,..]`, broadcast over channels.
    MulSpatial { x: Var, mask: Var },
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool { input: Var, argmax: Vec<u32> },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        weight: F,
        clamp: F,
    },
    Dropout { input: Var, mask: Vec<F> },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat { inputs: Vec<Var>, axis: usize },
}

impl<F> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant(name) => name,
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::AddChannel { .. } => "add_channel",
            Op::MulChannel { .. } => "mul_channel",
            Op::MulSpatial { .. } => "mul_spatial",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::Reshape(x) => vec![*x],
            Op::AddChannel { x, bias: w }
            | Op::MulChannel { x, weight: w }
            | Op::MulSpatial { x, mask: w } => vec![*x, *w],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::MaxPool { input, .. }
            | Op::Dropout { input, .. }
            | Op::Narrow { input, .. } => vec![*input],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

/// Adjoint buffer for `v`, allocated on first use; `None` when `v` needs no gradient.
pub(crate) fn slot<'a, F: Scalar>(
    adj: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'a mut [F]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![F::zero(); node.value.len()]))
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    out: &Node<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    match op {
        Op::Leaf | Op::Constant(_) => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Scale(..)
        | Op::AddScalar(..)
        | Op::Sigmoid(..)
        | Op::Tanh(..)
        | Op::Relu(..)
        | Op::Sum(..)
        | Op::Mean(..)
        | Op::AddChannel { .. }
        | Op::MulChannel { .. }
        | Op::MulSpatial { .. } => elementwise::backward(op, out, nodes, g, adj),
        Op::MatMul(..) => linear::backward(op, nodes, g, adj),
        Op::Conv2d { .. } | Op::MaxPool { .. } => conv::backward(op, nodes, g, adj),
        Op::Softmax(..) | Op::CrossEntropy { .. } => softmax::backward(op, out, nodes, g, adj),
        Op::Dropout { .. } => dropout::backward(op, nodes, g, adj),
        Op::Reshape(..) | Op::Narrow { .. } | Op::Concat { .. } => {
            shape::backward(op, out, nodes, g, adj)
        }
    }
}
