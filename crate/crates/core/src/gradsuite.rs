//! Finite-difference checks of every differentiable building block, from the
//! tensor primitives up to the pose loss through the weighted solver.
//!
//! Used by the `gradcheck` command and the test suites. All inputs are seeded,
//! small (8×8 to 16×16 images, at most a dozen points) and kept away from the
//! kinks of piecewise-linear operations so central differences are reliable.

use dnloc_tensor::{grad_check, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::StereoCamera;
use crate::error::Result;
use crate::featnet::{FeatureNetwork, FeatureSet};
use crate::matchpose::{keypoint_loss, match_features, pose_loss, solve_weighted, MatcherConfig, SE3Pose};
use crate::transnet::{content_loss, style_loss, LossNetwork, TransformNetwork};

/// Tolerances for the three tiers of checks.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const POSE_TOLERANCE: f64 = 1e-3;

const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Loss,
    Pose,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Primitive => PRIMITIVE_TOLERANCE,
            Tier::Loss => LOSS_TOLERANCE,
            Tier::Pose => POSE_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tier: Tier,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::constant(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero in magnitude, so `relu` never sits on its
/// kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::constant(shape.to_vec(), v)
}

/// Runs one check; the closure must return a scalar.
fn check(name: &'static str, tier: Tier, x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Result<CheckResult> {
    let r = grad_check(f, x, EPS)?;
    Ok(CheckResult {
        name,
        tier,
        max_rel_error: r.max_rel_error,
        passed: r.max_rel_error < tier.tolerance(),
    })
}

/// Fixed random weights used to turn a tensor into a scalar, so every output
/// element receives a distinct upstream gradient.
fn probe(rng: &mut ChaCha8Rng, like: &[usize]) -> Tensor {
    uniform(rng, like, -1.0, 1.0)
}

pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    use Tier::Primitive as P;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = uniform(&mut rng, &[4, 5], 0.5, 2.0);
    let row = uniform(&mut rng, &[1, 5], 0.5, 2.0);
    let p45 = probe(&mut rng, &[4, 5]);
    out.push(check("add/sub broadcast", P, &a, |x| x.add(&row).sub(&row.mul_scalar(0.3)).mul(&p45).sum())?);
    out.push(check("mul/div broadcast", P, &a, |x| x.mul(&row).div(&x.add_scalar(1.0)).mul(&p45).sum())?);
    out.push(check("exp/log/sqrt", P, &a, |x| x.exp().add(&x.log()).add(&x.sqrt()).mul(&p45).sum())?);
    out.push(check("sigmoid/square/neg", P, &a, |x| x.sigmoid().add(&x.square().neg()).mul(&p45).sum())?);
    let k = off_kink(&mut rng, &[4, 5]);
    out.push(check("relu", P, &k, |x| x.relu().mul(&p45).sum())?);
    out.push(check("l2_norm", P, &a, |x| x.l2_norm())?);
    out.push(check("mean/sum_axis/mean_axis", P, &a, |x| {
        x.sum_axis(1, true).mul(&x.mean_axis(0, false).sum()).sum().add(&x.mean())
    })?);
    out.push(check("softmax", P, &a, |x| x.softmax(1).mul(&p45).sum())?);
    let b = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let p43 = probe(&mut rng, &[4, 3]);
    out.push(check("matmul", P, &a, |x| x.matmul(&b).mul(&p43).sum())?);
    let p54 = probe(&mut rng, &[5, 4]);
    out.push(check("transpose/reshape", P, &a, |x| x.t().mul(&p54).sum().add(&x.reshape(&[20]).narrow(0, 3, 7).sum()))?);
    out.push(check("broadcast/concat/narrow", P, &row, |x| {
        Tensor::concat(&[x.broadcast_to(&[4, 5]), a.clone()], 0).narrow(0, 2, 4).mul(&p45).sum()
    })?);
    out.push(check("index_select", P, &a, |x| x.index_select(&[3, 0, 3]).mul(&p45.narrow(0, 0, 3)).sum())?);

    let img = uniform(&mut rng, &[2, 8, 8], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut rng, &[3], -0.1, 0.1);
    let pc = probe(&mut rng, &[3, 4, 4]);
    out.push(check("conv2d (input)", P, &img, |x| x.conv2d(&w, Some(&bias), 2, 1).mul(&pc).sum())?);
    out.push(check("conv2d (weight)", P, &w, |k| img.conv2d(k, Some(&bias), 2, 1).mul(&pc).sum())?);
    out.push(check("conv2d (bias)", P, &bias, |b| img.conv2d(&w, Some(b), 2, 1).mul(&pc).sum())?);
    let pu = probe(&mut rng, &[2, 16, 16]);
    out.push(check("upsample_nearest", P, &img, |x| x.upsample_nearest(2).mul(&pu).sum())?);

    let map = uniform(&mut rng, &[1, 16, 16], -2.0, 2.0);
    let p16 = probe(&mut rng, &[1, 16, 16]);
    out.push(check("cell_softmax", P, &map, |x| x.cell_softmax(8).mul(&p16).sum())?);
    let pcell = probe(&mut rng, &[1, 2, 2]);
    out.push(check("cell_sum", P, &map, |x| x.cell_sum(8).mul(&pcell).sum())?);

    // Sample coordinates away from integers: bilinear interpolation is only
    // piecewise smooth in the coordinates.
    let coords = Tensor::constant(vec![4, 2], vec![1.3, 2.6, 7.45, 0.35, 12.7, 14.2, 5.55, 9.4]);
    let features = uniform(&mut rng, &[3, 16, 16], -1.0, 1.0);
    let p43s = probe(&mut rng, &[4, 3]);
    out.push(check("bilinear_sample (map)", P, &features, |x| x.bilinear_sample(&coords).mul(&p43s).sum())?);
    out.push(check("bilinear_sample (coords)", P, &coords, |c| features.bilinear_sample(c).mul(&p43s).sum())?);
    Ok(out)
}

fn small_camera() -> StereoCamera {
    StereoCamera {
        fu: 20.0,
        fv: 20.0,
        cu: 7.5,
        cv: 7.5,
        baseline: 0.4,
        width: 16,
        height: 16,
    }
}

/// A hand-built 16×16 feature set with one keypoint and smooth random maps.
fn toy_features(rng: &mut ChaCha8Rng, keypoint: [f64; 2]) -> FeatureSet {
    let smooth = |rng: &mut ChaCha8Rng, c: usize| {
        let coarse = uniform(rng, &[c, 4, 4], -1.0, 1.0);
        let fine = uniform(rng, &[c, 16, 16], -0.2, 0.2);
        coarse.upsample_nearest(4).add(&fine)
    };
    FeatureSet {
        keypoints: Tensor::constant(vec![1, 2], keypoint.to_vec()),
        scores: Tensor::constant(vec![1, 1], vec![0.7]),
        descriptors: smooth(rng, 6),
        dense_scores: uniform(rng, &[1, 16, 16], 0.2, 0.9),
        detector_logits: Tensor::zeros(&[1, 16, 16]),
    }
}

pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    use Tier::Loss as L;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = Vec::new();
    let net = LossNetwork::new(seed);
    let y = uniform(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let y_hat = uniform(&mut rng, &[3, 8, 8], 0.0, 1.0);
    out.push(check("content_loss", L, &y_hat, |x| content_loss(x, &y, &net).expect("valid shapes"))?);
    out.push(check("style_loss", L, &y_hat, |x| style_loss(x, &y, &net).expect("valid shapes"))?);

    // Keypoint loss through the soft matcher, differentiated with respect to
    // the target descriptor map.
    let cam = small_camera();
    let source = toy_features(&mut rng, [6.3, 7.6]);
    let target = toy_features(&mut rng, [0.0, 0.0]);
    let disp_s = uniform(&mut rng, &[1, 16, 16], 2.0, 3.0);
    let disp_t = uniform(&mut rng, &[1, 16, 16], 2.0, 3.0);
    let gt = SE3Pose::from_yaw_pitch_roll(0.05, -0.02, 0.01, Vector3::new(0.1, 0.0, -0.2));
    let cfg = MatcherConfig {
        tau: 5.0,
        stride: 1,
        ..MatcherConfig::default()
    };
    let kp_loss = |desc: &Tensor| {
        let t = FeatureSet {
            descriptors: desc.clone(),
            ..target.clone()
        };
        let m = match_features(&source, &disp_s, &t, &disp_t, &cam, &cfg).expect("toy match");
        keypoint_loss(&m, &gt)
    };
    out.push(check("keypoint_loss (target descriptors)", L, &target.descriptors, kp_loss)?);

    let feat = FeatureNetwork::new(seed);
    let img = uniform(&mut rng, &[3, 16, 16], 0.0, 1.0);
    out.push(check("featnet mean keypoint", L, &img, |x| feat.detect(x).expect("16x16").keypoints.mean())?);
    let trans = TransformNetwork::new(seed);
    out.push(check("transnet mean output", L, &img, |x| trans.forward(x).expect("16x16").mean())?);
    Ok(out)
}

pub fn pose_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let gt = SE3Pose::from_yaw_pitch_roll(0.3, -0.1, 0.05, Vector3::new(0.4, -0.1, 0.8));
    let n = 8;
    let src: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..12.0)])
        .collect();
    let src_t = Tensor::constant(vec![n, 3], src.clone());
    let tgt: Vec<f64> = src
        .chunks_exact(3)
        .flat_map(|p| {
            let q = gt.transform_array([p[0], p[1], p[2]]);
            q.map(|v| v + rng.random_range(-0.05..0.05))
        })
        .collect();
    let tgt_t = Tensor::constant(vec![n, 3], tgt);
    let w = uniform(&mut rng, &[n, 1], 0.2, 1.0);
    let loss_of = |s: &Tensor, t: &Tensor, w: &Tensor| {
        let est = solve_weighted(s, t, w).expect("well-conditioned points");
        pose_loss(&est, &gt, 1.0)
    };
    Ok(vec![
        check("pose_loss . solve_pose (target points)", Tier::Pose, &tgt_t, |t| loss_of(&src_t, t, &w))?,
        check("pose_loss . solve_pose (source points)", Tier::Pose, &src_t, |s| loss_of(s, &tgt_t, &w))?,
        check("pose_loss . solve_pose (weights)", Tier::Pose, &w, |w| loss_of(&src_t, &tgt_t, w))?,
    ])
}

/// The whole suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut v = primitive_checks(seed)?;
    v.extend(loss_checks(seed)?);
    v.extend(pose_checks(seed)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all(results: &[CheckResult]) {
        for r in results {
            assert!(r.passed, "{} failed: {:e} (tolerance {:e})", r.name, r.max_rel_error, r.tier.tolerance());
        }
    }

    #[test]
    fn primitives_pass() {
        assert_all(&primitive_checks(11).unwrap());
    }

    #[test]
    fn losses_pass() {
        assert_all(&loss_checks(11).unwrap());
    }

    #[test]
    fn pose_chain_passes() {
        assert_all(&pose_checks(11).unwrap());
    }
}
