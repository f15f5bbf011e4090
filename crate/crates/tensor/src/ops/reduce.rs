use super::Op;
use crate::shape::split_axis;
use crate::tensor::Tensor;

impl Tensor {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out `axis`; with `keepdim` the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for k in 0..extent {
                    let src = &x[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::from_op(shape, out, Op::SumAxis { x: self.clone(), axis })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let m = (0..extent).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..extent {
                    let e = (out[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..extent {
                    out[idx(k)] /= z;
                }
            }
        }
        Tensor::from_op(self.shape().to_vec(), out, Op::Softmax { x: self.clone(), axis })
    }
}

pub(super) fn sum_axis_backward(in_shape: &[usize], axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(in_shape, axis);
    let mut gx = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for k in 0..extent {
            gx[(o * extent + k) * inner..(o * extent + k + 1) * inner]
                .copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    gx
}

pub(super) fn softmax_backward(shape: &[usize], axis: usize, y: &[f64], g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let dot: f64 = (0..extent).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..extent {
                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    gx
}
