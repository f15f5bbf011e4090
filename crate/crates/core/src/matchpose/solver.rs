//! Weighted point-set alignment: `min Σ wᵢ ‖C pₛⁱ + r − pₜⁱ‖²`.
//!
//! The differentiable path subtracts weighted centroids, forms the weighted
//! cross-covariance, and maps it to a rotation through an SVD with a
//! reflection guard. The SVD step is a custom graph node whose backward pass
//! uses the closed-form derivative of the polar rotation factor.

use dnloc_tensor::{CustomOp, Tensor};
use nalgebra::{DMatrix, Matrix3, Vector3};

use super::pose::{row_major, PoseTensors, SE3Pose};
use crate::error::{Error, Result};

/// Relative tolerance on `σᵢ + σⱼ` below which the rotation (and its
/// gradient) is ill-defined.
const DEGENERACY_TOL: f64 = 1e-9;

/// SVD `H = U diag(σ) Vᵀ` with `U, V ∈ SO(3)`; the reflection is absorbed into
/// the sign of `σ₃`. `R = U Vᵀ` is then the closest rotation to `H`.
#[derive(Clone, Copy, Debug)]
struct SignedSvd {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: [f64; 3],
}

impl SignedSvd {
    fn new(h: &Matrix3<f64>) -> Result<Self> {
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::DegenerateGeometry("non-finite cross-covariance".into()));
        }
        // nalgebra's statically sized 3×3 SVD goes through the eigenvectors of
        // HᵀH, which squares the condition number; the general bidiagonal
        // path on a dynamic matrix keeps full double precision.
        let svd = DMatrix::from_column_slice(3, 3, h.as_slice()).svd(true, true);
        let u0: Matrix3<f64> = svd.u.expect("requested U").fixed_view::<3, 3>(0, 0).into_owned();
        let v0: Matrix3<f64> = svd.v_t.expect("requested Vᵀ").fixed_view::<3, 3>(0, 0).transpose();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut u = Matrix3::zeros();
        let mut v = Matrix3::zeros();
        let mut sigma = [0.0; 3];
        for (k, &i) in order.iter().enumerate() {
            u.set_column(k, &u0.column(i));
            v.set_column(k, &v0.column(i));
            sigma[k] = svd.singular_values[i];
        }
        if u.determinant() < 0.0 {
            u.set_column(2, &(-u.column(2)));
            sigma[2] = -sigma[2];
        }
        if v.determinant() < 0.0 {
            v.set_column(2, &(-v.column(2)));
            sigma[2] = -sigma[2];
        }
        let scale = sigma[0].abs();
        let pairs = [(0, 1), (0, 2), (1, 2)];
        if scale == 0.0 || pairs.iter().any(|&(i, j)| (sigma[i] + sigma[j]).abs() <= DEGENERACY_TOL * scale) {
            return Err(Error::DegenerateGeometry(format!(
                "cross-covariance singular values {sigma:?} do not determine a unique rotation"
            )));
        }
        Ok(Self { u, v, sigma })
    }

    fn rotation(&self) -> Matrix3<f64> {
        self.u * self.v.transpose()
    }
}

/// Graph node `H ↦ R` for a `[3, 3]` input.
struct ProcrustesOp {
    input: Tensor,
    svd: SignedSvd,
}

impl CustomOp for ProcrustesOp {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }

    fn backward(&self, _output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>> {
        let SignedSvd { u, v, sigma } = self.svd;
        let g = Matrix3::from_row_slice(grad_output);
        let m = u.transpose() * g * v;
        let a = Matrix3::from_fn(|i, j| {
            if i == j {
                0.0
            } else {
                (m[(i, j)] - m[(j, i)]) / (sigma[i] + sigma[j])
            }
        });
        vec![row_major(&(u * a * v.transpose())).to_vec()]
    }
}

/// Closest rotation to a `[3, 3]` matrix, differentiable.
pub fn procrustes_rotation(h: &Tensor) -> Result<Tensor> {
    if h.shape() != [3, 3] {
        return Err(Error::Shape(format!("procrustes: expected [3, 3], got {:?}", h.shape())));
    }
    let hm = Matrix3::from_row_slice(&h.to_vec());
    let svd = SignedSvd::new(&hm)?;
    let r = row_major(&svd.rotation()).to_vec();
    Ok(Tensor::custom(
        vec![3, 3],
        r,
        Box::new(ProcrustesOp {
            input: h.clone(),
            svd,
        }),
    ))
}

/// Differentiable weighted alignment of `[N, 3]` source points onto `[N, 3]`
/// target points with `[N, 1]` non-negative weights.
pub fn solve_weighted(source: &Tensor, target: &Tensor, weights: &Tensor) -> Result<PoseTensors> {
    let n = source.dim(0);
    if source.shape() != [n, 3] || target.shape() != [n, 3] || weights.shape() != [n, 1] {
        return Err(Error::Shape(format!(
            "solve_pose: points {:?} / {:?}, weights {:?}",
            source.shape(),
            target.shape(),
            weights.shape()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateMatchSet { survivors: n });
    }
    let wsum = weights.sum();
    let total = wsum.item();
    if !(total > 0.0) || weights.data().iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::DegenerateGeometry(format!("match weights must be non-negative with positive sum, sum = {total}")));
    }
    let centroid = |p: &Tensor| p.mul(weights).sum_axis(0, true).div(&wsum);
    let (cs, ct) = (centroid(source), centroid(target));
    let qs = source.sub(&cs);
    let qt = target.sub(&ct);
    let h = qt.mul(weights).t().matmul(&qs);
    let rotation = procrustes_rotation(&h)?;
    let translation = ct.t().sub(&rotation.matmul(&cs.t())).reshape(&[3]);
    Ok(PoseTensors { rotation, translation })
}

/// Plain-number version of [`solve_weighted`] for hypothesis generation.
pub fn fit_rigid(source: &[Vector3<f64>], target: &[Vector3<f64>], weights: &[f64]) -> Result<SE3Pose> {
    let n = source.len();
    if n < 3 || target.len() != n || weights.len() != n {
        return Err(Error::DegenerateMatchSet { survivors: n.min(target.len()) });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("zero total weight".into()));
    }
    let cs = source.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let ct = target.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += weights[i] * (target[i] - ct) * (source[i] - cs).transpose();
    }
    let rotation = SignedSvd::new(&h)?.rotation();
    Ok(SE3Pose::new(rotation, ct - rotation * cs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnloc_tensor::grad_check;
    use nalgebra::{Matrix4, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quaternion (Horn) solution: the optimal rotation is the eigenvector of
    /// the largest eigenvalue of a symmetric 4×4 matrix built from the
    /// weighted cross-covariance.
    fn horn(ps: &[Vector3<f64>], pt: &[Vector3<f64>], w: &[f64]) -> SE3Pose {
        let total: f64 = w.iter().sum();
        let cs = ps.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
        let ct = pt.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
        let mut s = Matrix3::zeros();
        for i in 0..ps.len() {
            s += w[i] * (ps[i] - cs) * (pt[i] - ct).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        #[rustfmt::skip]
        let n = Matrix4::new(
            sxx + syy + szz, syz - szy,       szx - sxz,        sxy - syx,
            syz - szy,       sxx - syy - szz, sxy + syx,        szx + sxz,
            szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,       syz + szy,        -sxx - syy + szz,
        );
        let eig = n.symmetric_eigen();
        let k = (0..4).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
        let q = eig.eigenvectors.column(k);
        let (q0, qx, qy, qz) = (q[0], q[1], q[2], q[3]);
        #[rustfmt::skip]
        let r = Matrix3::new(
            q0*q0 + qx*qx - qy*qy - qz*qz, 2.0*(qx*qy - q0*qz),           2.0*(qx*qz + q0*qy),
            2.0*(qy*qx + q0*qz),           q0*q0 - qx*qx + qy*qy - qz*qz, 2.0*(qy*qz - q0*qx),
            2.0*(qz*qx - q0*qy),           2.0*(qz*qy + q0*qx),           q0*q0 - qx*qx - qy*qy + qz*qz,
        );
        SE3Pose::new(r, ct - r * cs)
    }

    fn tensors(ps: &[Vector3<f64>], pt: &[Vector3<f64>], w: &[f64]) -> (Tensor, Tensor, Tensor) {
        let flat = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        (
            Tensor::constant(vec![ps.len(), 3], flat(ps)),
            Tensor::constant(vec![pt.len(), 3], flat(pt)),
            Tensor::constant(vec![w.len(), 1], w.to_vec()),
        )
    }

    fn solve(ps: &[Vector3<f64>], pt: &[Vector3<f64>], w: &[f64]) -> Result<SE3Pose> {
        let (a, b, c) = tensors(ps, pt, w);
        Ok(solve_weighted(&a, &b, &c)?.to_pose())
    }

    fn tetra() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
        ]
    }

    #[test]
    fn identical_sets_give_identity() {
        let p = tetra();
        let t = solve(&p, &p, &[1.0; 4]).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_quarter_turn() {
        let gt = SE3Pose::new(
            *Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).matrix(),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let ps = tetra();
        let pt: Vec<_> = ps.iter().map(|p| gt.transform(p)).collect();
        let t = solve(&ps, &pt, &[1.0; 4]).unwrap();
        assert!((t.rotation - gt.rotation).norm() < 1e-9);
        assert!((t.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let gt = SE3Pose::from_yaw_pitch_roll(0.2, 0.1, -0.3, Vector3::new(0.5, -0.2, 1.0));
        let mut ps = tetra();
        let mut pt: Vec<_> = ps.iter().map(|p| gt.transform(p)).collect();
        let base = solve(&ps, &pt, &[1.0; 4]).unwrap();
        ps.push(Vector3::new(3.0, 3.0, 3.0));
        pt.push(Vector3::new(-9.0, 4.0, 1.0));
        let with = solve(&ps, &pt, &[1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((with.rotation - base.rotation).norm() < 1e-9);
        assert!((with.translation - base.translation).norm() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let ps: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(solve(&ps, &ps, &[1.0; 4]), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(fit_rigid(&ps, &ps, &[1.0; 4]), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn matches_quaternion_oracle_on_noisy_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(3..=8);
            let ps: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..8.0)))
                .collect();
            let pt: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..8.0)))
                .collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let (a, b) = (solve(&ps, &pt, &w).unwrap(), horn(&ps, &pt, &w));
            assert!((a.rotation - b.rotation).norm() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
            let c = fit_rigid(&ps, &pt, &w).unwrap();
            assert!((a.rotation - c.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = Tensor::constant(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
            let w = Tensor::constant(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
            let r = grad_check(|x| procrustes_rotation(x).unwrap().mul(&w).sum(), &h, 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps: Vec<_> = (0..6).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let pt: Vec<_> = (0..6).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let w7: Vec<f64> = w.iter().map(|x| 7.0 * x).collect();
        let (a, b) = (solve(&ps, &pt, &w).unwrap(), solve(&ps, &pt, &w7).unwrap());
        assert!((a.rotation - b.rotation).norm() < 1e-12);
        assert!((a.translation - b.translation).norm() < 1e-12);
    }
}
