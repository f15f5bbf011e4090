use super::Op;
use crate::tensor::Tensor;

fn planes_hw(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 2, "spatial op needs at least two axes");
    let (h, w) = (shape[r - 2], shape[r - 1]);
    (shape[..r - 2].iter().product(), h, w)
}

/// Visits every `cell × cell` window of every plane, passing the flat indices
/// of the window in row-major order.
fn for_each_cell(planes: usize, h: usize, w: usize, cell: usize, mut f: impl FnMut(usize, &[usize])) {
    let mut idx = Vec::with_capacity(cell * cell);
    let mut n = 0;
    for p in 0..planes {
        for cy in 0..h / cell {
            for cx in 0..w / cell {
                idx.clear();
                for y in cy * cell..(cy + 1) * cell {
                    for x in cx * cell..(cx + 1) * cell {
                        idx.push((p * h + y) * w + x);
                    }
                }
                f(n, &idx);
                n += 1;
            }
        }
    }
}

/// Per-coordinate bilinear stencil: lower index, upper index, fractional
/// weight, and whether the coordinate lies inside the valid range (outside
/// coordinates are clamped and get no coordinate gradient).
fn stencil(coord: f64, extent: usize) -> (usize, usize, f64, bool) {
    if extent == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (extent - 1) as f64;
    let inside = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(extent - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

impl Tensor {
    /// Softmax over each non-overlapping `cell × cell` window of the two
    /// trailing axes.
    pub fn cell_softmax(&self, cell: usize) -> Tensor {
        let (planes, h, w) = planes_hw(self.shape());
        assert!(h % cell == 0 && w % cell == 0, "extent {h}x{w} not divisible by cell {cell}");
        let mut out = self.to_vec();
        for_each_cell(planes, h, w, cell, |_, idx| {
            let m = idx.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in idx {
                out[i] = (out[i] - m).exp();
                z += out[i];
            }
            for &i in idx {
                out[i] /= z;
            }
        });
        Tensor::from_op(self.shape().to_vec(), out, Op::CellSoftmax { x: self.clone(), cell })
    }

    /// Sum over each `cell × cell` window: `[.., H, W] -> [.., H/cell, W/cell]`.
    pub fn cell_sum(&self, cell: usize) -> Tensor {
        let (planes, h, w) = planes_hw(self.shape());
        assert!(h % cell == 0 && w % cell == 0, "extent {h}x{w} not divisible by cell {cell}");
        let mut out = vec![0.0; planes * (h / cell) * (w / cell)];
        {
            let x = self.data();
            for_each_cell(planes, h, w, cell, |n, idx| {
                out[n] = idx.iter().map(|&i| x[i]).sum();
            });
        }
        let r = self.rank();
        let mut shape = self.shape().to_vec();
        shape[r - 2] = h / cell;
        shape[r - 1] = w / cell;
        Tensor::from_op(shape, out, Op::CellSum { x: self.clone(), cell })
    }

    /// Samples a `[C, H, W]` map at `N` fractional pixel coordinates given as
    /// `[N, 2]` rows of `(u, v)` = (column, row). Returns `[N, C]`.
    /// Coordinates are clamped to the image rectangle.
    pub fn bilinear_sample(&self, coords: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 3, "bilinear_sample map must be [C, H, W]");
        assert!(coords.rank() == 2 && coords.dim(1) == 2, "coords must be [N, 2]");
        let (c, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        let n = coords.dim(0);
        let mut out = vec![0.0; n * c];
        {
            let m = self.data();
            let q = coords.data();
            for i in 0..n {
                let (x0, x1, fx, _) = stencil(q[2 * i], w);
                let (y0, y1, fy, _) = stencil(q[2 * i + 1], h);
                for ch in 0..c {
                    let at = |y: usize, x: usize| m[(ch * h + y) * w + x];
                    out[i * c + ch] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                }
            }
        }
        Tensor::from_op(
            vec![n, c],
            out,
            Op::Bilinear {
                map: self.clone(),
                coords: coords.clone(),
            },
        )
    }
}

pub(super) fn cell_softmax_backward(shape: &[usize], cell: usize, y: &[f64], g: &[f64]) -> Vec<f64> {
    let (planes, h, w) = planes_hw(shape);
    let mut gx = vec![0.0; y.len()];
    for_each_cell(planes, h, w, cell, |_, idx| {
        let dot: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
        for &i in idx {
            gx[i] = y[i] * (g[i] - dot);
        }
    });
    gx
}

pub(super) fn cell_sum_backward(shape: &[usize], cell: usize, g: &[f64]) -> Vec<f64> {
    let (planes, h, w) = planes_hw(shape);
    let mut gx = vec![0.0; planes * h * w];
    for_each_cell(planes, h, w, cell, |n, idx| {
        for &i in idx {
            gx[i] = g[n];
        }
    });
    gx
}

pub(super) fn bilinear_backward(map: &Tensor, coords: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let n = coords.dim(0);
    let m = map.data();
    let q = coords.data();
    let mut gmap = map.requires_grad().then(|| vec![0.0; m.len()]);
    let mut gq = coords.requires_grad().then(|| vec![0.0; q.len()]);
    for i in 0..n {
        let (x0, x1, fx, in_x) = stencil(q[2 * i], w);
        let (y0, y1, fy, in_y) = stencil(q[2 * i + 1], h);
        for ch in 0..c {
            let gi = g[i * c + ch];
            let base = ch * h * w;
            if let Some(gm) = gmap.as_mut() {
                gm[base + y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                gm[base + y0 * w + x1] += gi * (1.0 - fy) * fx;
                gm[base + y1 * w + x0] += gi * fy * (1.0 - fx);
                gm[base + y1 * w + x1] += gi * fy * fx;
            }
            if let Some(gc) = gq.as_mut() {
                let at = |y: usize, x: usize| m[base + y * w + x];
                if in_x {
                    gc[2 * i] += gi * ((1.0 - fy) * (at(y0, x1) - at(y0, x0)) + fy * (at(y1, x1) - at(y1, x0)));
                }
                if in_y {
                    gc[2 * i + 1] += gi * ((1.0 - fx) * (at(y1, x0) - at(y0, x0)) + fx * (at(y1, x1) - at(y0, x1)));
                }
            }
        }
    }
    let mut res = Vec::with_capacity(2);
    if let Some(gm) = gmap {
        res.push((map.clone(), gm));
    }
    if let Some(gc) = gq {
        res.push((coords.clone(), gc));
    }
    res
}
