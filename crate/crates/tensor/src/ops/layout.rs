use super::Op;
use crate::shape::{broadcast_index_map, numel, split_axis};
use crate::tensor::Tensor;

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone()))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "t() expects a matrix, got {:?}", self.shape());
        let (r, c) = (self.dim(0), self.dim(1));
        let data = transpose_data(&self.data(), r, c);
        Tensor::from_op(vec![c, r], data, Op::Transpose(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let map = broadcast_index_map(self.shape(), shape);
        let data = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        Tensor::from_op(shape.to_vec(), data, Op::BroadcastTo(self.clone()))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(xs: &[Tensor], axis: usize) -> Tensor {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let mut shape = xs[0].shape().to_vec();
        for x in &xs[1..] {
            assert_eq!(x.rank(), shape.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in shape.iter().zip(x.shape()).enumerate() {
                assert!(ax == axis || a == b, "concat extent mismatch on axis {ax}");
            }
        }
        shape[axis] = xs.iter().map(|x| x.dim(axis)).sum();
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for x in xs {
            let ext = x.dim(axis);
            let data = x.data();
            for o in 0..outer {
                let src = &data[o * ext * inner..(o + 1) * ext * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        Tensor::from_op(shape, out, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.dim(axis), "narrow out of range");
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let s = (o * ext + start) * inner;
                out.extend_from_slice(&x[s..s + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(shape, out, Op::Narrow { x: self.clone(), axis, start })
    }

    /// Gathers rows (entries along axis 0). Indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let row: usize = self.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        {
            let x = self.data();
            for &i in indices {
                assert!(i < self.dim(0), "row index {i} out of range");
                out.extend_from_slice(&x[i * row..(i + 1) * row]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_op(shape, out, Op::IndexSelect { x: self.clone(), indices: indices.to_vec() })
    }
}

pub(super) fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(super) fn broadcast_backward(src: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let map = broadcast_index_map(src, out_shape);
    let mut gx = vec![0.0; numel(src)];
    for (gi, &si) in g.iter().zip(&map) {
        gx[si] += gi;
    }
    gx
}

pub(super) fn concat_backward(xs: &[Tensor], axis: usize, out_shape: &[usize], g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let (outer, total, inner) = split_axis(out_shape, axis);
    let mut res = Vec::new();
    let mut offset = 0;
    for x in xs {
        let ext = x.dim(axis);
        if x.requires_grad() {
            let mut gx = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                let s = (o * total + offset) * inner;
                gx.extend_from_slice(&g[s..s + ext * inner]);
            }
            res.push((x.clone(), gx));
        }
        offset += ext;
    }
    res
}

pub(super) fn narrow_backward(in_shape: &[usize], axis: usize, start: usize, out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(in_shape, axis);
    let len = out_shape[axis];
    let mut gx = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        let d = (o * ext + start) * inner;
        gx[d..d + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}

pub(super) fn index_select_backward(in_shape: &[usize], indices: &[usize], g: &[f64]) -> Vec<f64> {
    let row: usize = in_shape[1..].iter().product();
    let mut gx = vec![0.0; numel(in_shape)];
    for (k, &i) in indices.iter().enumerate() {
        gx[i * row..(i + 1) * row]
            .iter_mut()
            .zip(&g[k * row..(k + 1) * row])
            .for_each(|(a, b)| *a += b);
    }
    gx
}
