use super::Op;
use crate::tensor::Tensor;

/// `c = a · b` for row-major `a` (m×k) and `b` (k×n), with optional transposed
/// views expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every element addressed by (m, k, n) and the
    // given strides; callers pass dense buffers of the matching sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() == 2 && other.rank() == 2, "matmul expects matrices");
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dimensions {:?} x {:?}", self.shape(), other.shape());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data(),
            (k as isize, 1),
            &other.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone()))
    }
}

pub(super) fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    let mut res = Vec::with_capacity(2);
    if a.requires_grad() {
        // dA = G · Bᵀ
        let mut ga = vec![0.0; m * k];
        gemm(m, n, k, g, (n as isize, 1), &b.data(), (1, n as isize), &mut ga, false);
        res.push((a.clone(), ga));
    }
    if b.requires_grad() {
        // dB = Aᵀ · G
        let mut gb = vec![0.0; k * n];
        gemm(k, m, n, &a.data(), (1, k as isize), g, (n as isize, 1), &mut gb, false);
        res.push((b.clone(), gb));
    }
    res
}
