//! The closed set of differentiable primitives. Each variant stores its inputs
//! plus whatever it needs to produce input gradients from the output gradient.

mod conv;
mod elementwise;
mod layout;
mod linalg;
mod reduce;
mod spatial;

use crate::tensor::Tensor;

pub(crate) use elementwise::{BinaryKind, UnaryKind};

/// A user-defined primitive. Implementors return one gradient per input, in
/// the order of [`CustomOp::inputs`]; entries for inputs that do not require a
/// gradient may be empty.
pub trait CustomOp: Send + Sync {
    fn inputs(&self) -> Vec<&Tensor>;
    fn backward(&self, output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>>;
}

pub(crate) enum Op {
    Binary { kind: BinaryKind, a: Tensor, b: Tensor },
    Unary { kind: UnaryKind, x: Tensor },
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Sum(Tensor),
    SumAxis { x: Tensor, axis: usize },
    Softmax { x: Tensor, axis: usize },
    Reshape(Tensor),
    Transpose(Tensor),
    BroadcastTo(Tensor),
    Concat { xs: Vec<Tensor>, axis: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    IndexSelect { x: Tensor, indices: Vec<usize> },
    MatMul(Tensor, Tensor),
    Conv2d(Box<conv::Conv2dSaved>),
    Upsample { x: Tensor, factor: usize },
    CellSoftmax { x: Tensor, cell: usize },
    CellSum { x: Tensor, cell: usize },
    Bilinear { map: Tensor, coords: Tensor },
    Custom(Box<dyn CustomOp>),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Binary { a, b, .. } | Op::MatMul(a, b) => vec![a, b],
            Op::Unary { x, .. }
            | Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Sum(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::BroadcastTo(x)
            | Op::Narrow { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Upsample { x, .. }
            | Op::CellSoftmax { x, .. }
            | Op::CellSum { x, .. } => vec![x],
            Op::Concat { xs, .. } => xs.iter().collect(),
            Op::Conv2d(saved) => saved.inputs(),
            Op::Bilinear { map, coords } => vec![map, coords],
            Op::Custom(op) => op.inputs(),
        }
    }

    /// Gradients for each input that requires one.
    pub(crate) fn backward(&self, out_shape: &[usize], out: &[f64], g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        match self {
            Op::Binary { kind, a, b } => elementwise::binary_backward(*kind, a, b, g),
            Op::Unary { kind, x } => vec![(x.clone(), elementwise::unary_backward(*kind, x, out, g))],
            Op::AddScalar(x) => vec![(x.clone(), g.to_vec())],
            Op::MulScalar(x, c) => vec![(x.clone(), g.iter().map(|v| v * c).collect())],
            Op::Sum(x) => vec![(x.clone(), vec![g[0]; x.numel()])],
            Op::SumAxis { x, axis } => vec![(x.clone(), reduce::sum_axis_backward(x.shape(), *axis, g))],
            Op::Softmax { x, axis } => vec![(x.clone(), reduce::softmax_backward(x.shape(), *axis, out, g))],
            Op::Reshape(x) => vec![(x.clone(), g.to_vec())],
            Op::Transpose(x) => vec![(x.clone(), layout::transpose_data(g, out_shape[0], out_shape[1]))],
            Op::BroadcastTo(x) => vec![(x.clone(), layout::broadcast_backward(x.shape(), out_shape, g))],
            Op::Concat { xs, axis } => layout::concat_backward(xs, *axis, out_shape, g),
            Op::Narrow { x, axis, start } => {
                vec![(x.clone(), layout::narrow_backward(x.shape(), *axis, *start, out_shape, g))]
            }
            Op::IndexSelect { x, indices } => {
                vec![(x.clone(), layout::index_select_backward(x.shape(), indices, g))]
            }
            Op::MatMul(a, b) => linalg::matmul_backward(a, b, g),
            Op::Conv2d(saved) => saved.backward(g),
            Op::Upsample { x, factor } => vec![(x.clone(), conv::upsample_backward(x.shape(), *factor, g))],
            Op::CellSoftmax { x, cell } => {
                vec![(x.clone(), spatial::cell_softmax_backward(x.shape(), *cell, out, g))]
            }
            Op::CellSum { x, cell } => vec![(x.clone(), spatial::cell_sum_backward(x.shape(), *cell, g))],
            Op::Bilinear { map, coords } => spatial::bilinear_backward(map, coords, g),
            Op::Custom(op) => {
                let grads = op.backward(out, g);
                op.inputs()
                    .into_iter()
                    .zip(grads)
                    .filter(|(t, gr)| t.requires_grad() && gr.len() == t.numel())
                    .map(|(t, gr)| (t.clone(), gr))
                    .collect()
            }
        }
    }
}

impl Tensor {
    /// Wraps the output of a [`CustomOp`].
    pub fn custom(shape: Vec<usize>, data: Vec<f64>, op: Box<dyn CustomOp>) -> Tensor {
        Tensor::from_op(shape, data, Op::Custom(op))
    }
}
