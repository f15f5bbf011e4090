use super::linalg::gemm;
use super::Op;
use crate::tensor::Tensor;

pub(crate) struct Conv2dSaved {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    batch: usize,
    channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    /// im2col buffers for each batch item, `[C·k·k, Ho·Wo]` row-major.
    cols: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let plane = ho * wo;
    for c in 0..channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let plane = ho * wo;
    for c in 0..channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[C, H, W]` or `[N, C, H, W]`, `w` is `[O, C, k, k]` and the
    /// optional bias is `[O]`. Output extent is `(H + 2·pad − k) / stride + 1`.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let batched = self.rank() == 4;
        assert!(self.rank() == 3 || batched, "conv2d input must be rank 3 or 4");
        let (batch, channels, h, wd) = if batched {
            (self.dim(0), self.dim(1), self.dim(2), self.dim(3))
        } else {
            (1, self.dim(0), self.dim(1), self.dim(2))
        };
        assert_eq!(w.rank(), 4, "conv2d kernel must be [O, C, k, k]");
        let (o, k) = (w.dim(0), w.dim(2));
        assert_eq!(w.dim(1), channels, "conv2d channel mismatch");
        assert_eq!(w.dim(3), k, "conv2d kernel must be square");
        if let Some(b) = b {
            assert_eq!(b.shape(), &[o], "conv2d bias must be [O]");
        }
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = channels * k * k;
        let plane = ho * wo;

        let mut cols = vec![0.0; batch * ckk * plane];
        let mut out = vec![0.0; batch * o * plane];
        {
            let x = self.data();
            let wdat = w.data();
            for n in 0..batch {
                let xin = &x[n * channels * h * wd..(n + 1) * channels * h * wd];
                let col = &mut cols[n * ckk * plane..(n + 1) * ckk * plane];
                im2col(xin, channels, (h, wd), (ho, wo), k, stride, pad, col);
                let dst = &mut out[n * o * plane..(n + 1) * o * plane];
                if let Some(b) = b {
                    let bd = b.data();
                    for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bd[oc]);
                    }
                }
                gemm(o, ckk, plane, &wdat, (ckk as isize, 1), col, (plane as isize, 1), dst, b.is_some());
            }
        }
        let shape = if batched { vec![batch, o, ho, wo] } else { vec![o, ho, wo] };
        let saved = Conv2dSaved {
            x: self.clone(),
            w: w.clone(),
            b: b.cloned(),
            batch,
            channels,
            in_hw: (h, wd),
            out_hw: (ho, wo),
            kernel: k,
            stride,
            pad,
            cols,
        };
        Tensor::from_op(shape, out, Op::Conv2d(Box::new(saved)))
    }

    /// Nearest-neighbour upsampling of the two trailing axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        assert!(self.rank() >= 2 && factor >= 1);
        let r = self.rank();
        let (h, w) = (self.dim(r - 2), self.dim(r - 1));
        let planes = self.numel() / (h * w);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * ho * wo];
        {
            let x = self.data();
            for p in 0..planes {
                for y in 0..ho {
                    let src = &x[(p * h + y / factor) * w..(p * h + y / factor + 1) * w];
                    let dst = &mut out[(p * ho + y) * wo..(p * ho + y + 1) * wo];
                    for (xo, v) in dst.iter_mut().enumerate() {
                        *v = src[xo / factor];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Tensor::from_op(shape, out, Op::Upsample { x: self.clone(), factor })
    }
}

impl Conv2dSaved {
    pub(super) fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.b {
            v.push(b);
        }
        v
    }

    pub(super) fn backward(&self, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let (h, w) = self.in_hw;
        let (ho, wo) = self.out_hw;
        let plane = ho * wo;
        let k = self.kernel;
        let ckk = self.channels * k * k;
        let o = self.w.dim(0);
        let mut res = Vec::with_capacity(3);

        if self.w.requires_grad() {
            let mut gw = vec![0.0; o * ckk];
            for n in 0..self.batch {
                let gn = &g[n * o * plane..(n + 1) * o * plane];
                let col = &self.cols[n * ckk * plane..(n + 1) * ckk * plane];
                // dW += G · colsᵀ
                gemm(o, plane, ckk, gn, (plane as isize, 1), col, (1, plane as isize), &mut gw, true);
            }
            res.push((self.w.clone(), gw));
        }
        if let Some(b) = &self.b {
            if b.requires_grad() {
                let mut gb = vec![0.0; o];
                for n in 0..self.batch {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let s = (n * o + oc) * plane;
                        *acc += g[s..s + plane].iter().sum::<f64>();
                    }
                }
                res.push((b.clone(), gb));
            }
        }
        if self.x.requires_grad() {
            let wdat = self.w.data();
            let mut gx = vec![0.0; self.batch * self.channels * h * w];
            let mut dcols = vec![0.0; ckk * plane];
            for n in 0..self.batch {
                let gn = &g[n * o * plane..(n + 1) * o * plane];
                // dcols = Wᵀ · G
                gemm(ckk, o, plane, &wdat, (1, ckk as isize), gn, (plane as isize, 1), &mut dcols, false);
                let dx = &mut gx[n * self.channels * h * w..(n + 1) * self.channels * h * w];
                col2im(&dcols, self.channels, (h, w), (ho, wo), k, self.stride, self.pad, dx);
            }
            res.push((self.x.clone(), gx));
        }
        res
    }
}

pub(super) fn upsample_backward(in_shape: &[usize], factor: usize, g: &[f64]) -> Vec<f64> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes: usize = in_shape[..r - 2].iter().product();
    let (ho, wo) = (h * factor, w * factor);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            let dst = (p * h + y / factor) * w;
            let src = &g[(p * ho + y) * wo..(p * ho + y + 1) * wo];
            for (xo, v) in src.iter().enumerate() {
                gx[dst + xo / factor] += v;
            }
        }
    }
    gx
}
