//! Dense soft matching, outlier rejection, weighted pose solving and the
//! geometric losses.

mod matching;
mod pose;
mod solver;

pub use matching::{
    match_features, match_weight, match_weight_tensor, normalize_rows, soft_correspondences, target_grid, zncc, zncc_matrix,
    zncc_rows, ZNCC_EPS,
};
pub use pose::{row_major, PoseRecord, PoseTensors, SE3Pose, POSE_FRAME};
pub use solver::{fit_rigid, procrustes_rotation, solve_weighted};

use dnloc_tensor::Tensor;
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::DEFAULT_MIN_DISPARITY;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sample_size: usize,
    /// Meters.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 256,
            sample_size: 3,
            inlier_threshold: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    /// Softmax temperature applied to ZNCC scores.
    pub tau: f64,
    /// Target-grid subsampling stride in pixels.
    pub stride: usize,
    /// Meters; used only when the ground-truth pose is known.
    pub gt_inlier_threshold: f64,
    /// Pixels; matches at or below this disparity on either side are dropped.
    pub min_disparity: f64,
    pub ransac: RansacConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            stride: 2,
            gt_inlier_threshold: 0.5,
            min_disparity: DEFAULT_MIN_DISPARITY,
            ransac: RansacConfig::default(),
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.ransac;
        if !(self.tau > 0.0)
            || self.stride == 0
            || !(self.gt_inlier_threshold > 0.0)
            || !(self.min_disparity >= 0.0)
            || !(r.inlier_threshold > 0.0)
            || r.sample_size < 3
            || r.iterations == 0
        {
            return Err(Error::Config(format!("invalid matcher configuration {self:?}")));
        }
        Ok(())
    }
}

/// Matches between a source and a target image. Row `i` of every tensor
/// describes the same match.
#[derive(Clone, Debug)]
pub struct MatchSet {
    /// `[M, 2]`.
    pub source_keypoints: Tensor,
    /// `[M, 2]` soft-matched target coordinates.
    pub target_keypoints: Tensor,
    /// `[M, 3]` meters, source camera frame.
    pub source_points: Tensor,
    /// `[M, 3]` meters, target camera frame.
    pub target_points: Tensor,
    /// `[M, D]`.
    pub source_descriptors: Tensor,
    /// `[M, D]`.
    pub target_descriptors: Tensor,
    /// `[M, 1]`.
    pub source_scores: Tensor,
    /// `[M, 1]`.
    pub target_scores: Tensor,
    /// `[M, 1]` in `[0, 1]`.
    pub weights: Tensor,
    /// Keypoint (cell) index each match came from.
    pub source_index: Vec<usize>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> MatchSet {
        MatchSet {
            source_keypoints: self.source_keypoints.index_select(rows),
            target_keypoints: self.target_keypoints.index_select(rows),
            source_points: self.source_points.index_select(rows),
            target_points: self.target_points.index_select(rows),
            source_descriptors: self.source_descriptors.index_select(rows),
            target_descriptors: self.target_descriptors.index_select(rows),
            source_scores: self.source_scores.index_select(rows),
            target_scores: self.target_scores.index_select(rows),
            weights: self.weights.index_select(rows),
            source_index: rows.iter().map(|&r| self.source_index[r]).collect(),
        }
    }

    /// Builds a set directly from points and weights; keypoints, descriptors
    /// and scores are filled with placeholders.
    pub fn from_points(source: &[Vector3<f64>], target: &[Vector3<f64>], weights: &[f64]) -> MatchSet {
        let n = source.len();
        assert!(target.len() == n && weights.len() == n, "point and weight counts differ");
        let flat = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        MatchSet {
            source_keypoints: Tensor::zeros(&[n, 2]),
            target_keypoints: Tensor::zeros(&[n, 2]),
            source_points: Tensor::constant(vec![n, 3], flat(source)),
            target_points: Tensor::constant(vec![n, 3], flat(target)),
            source_descriptors: Tensor::zeros(&[n, 1]),
            target_descriptors: Tensor::zeros(&[n, 1]),
            source_scores: Tensor::full(&[n, 1], 1.0),
            target_scores: Tensor::full(&[n, 1], 1.0),
            weights: Tensor::constant(vec![n, 1], weights.to_vec()),
            source_index: (0..n).collect(),
        }
    }

    pub fn source_vectors(&self) -> Vec<Vector3<f64>> {
        vectors(&self.source_points)
    }

    pub fn target_vectors(&self) -> Vec<Vector3<f64>> {
        vectors(&self.target_points)
    }
}

fn vectors(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Indices of matches whose 3-D alignment error under `pose` is below
/// `threshold`.
fn consistent(source: &[Vector3<f64>], target: &[Vector3<f64>], pose: &SE3Pose, threshold: f64) -> Vec<usize> {
    (0..source.len())
        .filter(|&i| (pose.transform(&source[i]) - target[i]).norm() < threshold)
        .collect()
}

/// Keeps matches consistent with the ground-truth pose (training only).
pub fn reject_outliers_gt(matches: &MatchSet, gt: &SE3Pose, threshold: f64) -> Result<MatchSet> {
    let keep = consistent(&matches.source_vectors(), &matches.target_vectors(), gt, threshold);
    if keep.len() < 3 {
        return Err(Error::DegenerateMatchSet { survivors: keep.len() });
    }
    Ok(matches.select(&keep))
}

/// Largest consensus set over random minimal-sample rigid hypotheses. The
/// first hypothesis reaching the maximum count wins, so the result is a pure
/// function of the inputs and the configured seed.
pub fn ransac(matches: &MatchSet, cfg: &RansacConfig) -> Result<MatchSet> {
    let inliers = ransac_inliers(&matches.source_vectors(), &matches.target_vectors(), cfg)?;
    Ok(matches.select(&inliers))
}

pub fn ransac_inliers(source: &[Vector3<f64>], target: &[Vector3<f64>], cfg: &RansacConfig) -> Result<Vec<usize>> {
    let n = source.len();
    if n < cfg.sample_size.max(3) {
        return Err(Error::DegenerateMatchSet { survivors: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Vec<usize> = Vec::new();
    let ones = vec![1.0; cfg.sample_size];
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, cfg.sample_size).into_vec();
        let ps: Vec<_> = idx.iter().map(|&i| source[i]).collect();
        let pt: Vec<_> = idx.iter().map(|&i| target[i]).collect();
        let Ok(hyp) = fit_rigid(&ps, &pt, &ones) else { continue };
        let set = consistent(source, target, &hyp, cfg.inlier_threshold);
        if set.len() > best.len() {
            best = set;
            if best.len() == n {
                break;
            }
        }
    }
    if best.len() < 3 {
        return Err(Error::LocalizationFailure { best: best.len() });
    }
    Ok(best)
}

/// Weighted pose of a match set; differentiable in points and weights.
pub fn solve_pose(matches: &MatchSet) -> Result<PoseTensors> {
    solve_weighted(&matches.source_points, &matches.target_points, &matches.weights)
}

/// `Σᵢ ‖C pₛⁱ + r − p̂ₜⁱ‖²` under the ground-truth pose.
pub fn keypoint_loss(matches: &MatchSet, gt: &SE3Pose) -> Tensor {
    let c = gt.rotation_tensor();
    let r = gt.translation_tensor();
    matches.source_points.matmul(&c.t()).add(&r).sub(&matches.target_points).square().sum()
}

/// `‖r − r̂‖² + λ ‖C Ĉᵀ − I‖²_F` with `(C, r)` the ground truth.
pub fn pose_loss(estimate: &PoseTensors, gt: &SE3Pose, lambda_rot: f64) -> Tensor {
    let dt = gt.translation_tensor().sub(&estimate.translation).square().sum();
    let eye = Tensor::constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let dr = gt.rotation_tensor().matmul(&estimate.rotation.t()).sub(&eye).square().sum();
    dt.add(&dr.mul_scalar(lambda_rot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.5), rng.random_range(2.0..15.0)))
            .collect()
    }

    fn gt() -> SE3Pose {
        SE3Pose::from_yaw_pitch_roll(0.05, 0.01, -0.01, Vector3::new(0.3, 0.0, -0.6))
    }

    #[test]
    fn gt_rejection() {
        let ps = cloud(10, 1);
        let mut pt: Vec<_> = ps.iter().map(|p| gt().transform(p)).collect();
        let m = MatchSet::from_points(&ps, &pt, &[1.0; 10]);
        assert_eq!(reject_outliers_gt(&m, &gt(), 0.1).unwrap().len(), 10);
        pt[4].x += 1.0;
        let m = MatchSet::from_points(&ps, &pt, &[1.0; 10]);
        let kept = reject_outliers_gt(&m, &gt(), 0.1).unwrap();
        assert_eq!(kept.source_index, vec![0, 1, 2, 3, 5, 6, 7, 8, 9]);
        assert_eq!(reject_outliers_gt(&m, &gt(), f64::INFINITY).unwrap().len(), 10);
        pt.iter_mut().skip(2).for_each(|p| p.y += 2.0);
        let m = MatchSet::from_points(&ps, &pt, &[1.0; 10]);
        assert!(matches!(reject_outliers_gt(&m, &gt(), 0.1), Err(Error::DegenerateMatchSet { survivors: 2 })));
    }

    #[test]
    fn ransac_finds_consistent_subset() {
        let ps = cloud(10, 2);
        let mut pt: Vec<_> = ps.iter().map(|p| gt().transform(p)).collect();
        for i in [1, 5, 8] {
            pt[i].z += 1.0;
        }
        let cfg = RansacConfig {
            inlier_threshold: 0.1,
            ..Default::default()
        };
        let m = MatchSet::from_points(&ps, &pt, &[1.0; 10]);
        let a = ransac(&m, &cfg).unwrap();
        assert_eq!(a.source_index, vec![0, 2, 3, 4, 6, 7, 9]);
        let b = ransac(&m, &cfg).unwrap();
        assert_eq!(a.source_index, b.source_index);
        let exact: Vec<_> = ps.iter().map(|p| gt().transform(p)).collect();
        assert_eq!(ransac(&MatchSet::from_points(&ps, &exact, &[1.0; 10]), &cfg).unwrap().len(), 10);
    }

    #[test]
    fn ransac_fails_without_consensus() {
        let ps = cloud(6, 3);
        let pt = cloud(6, 4);
        let cfg = RansacConfig {
            inlier_threshold: 1e-6,
            ..Default::default()
        };
        let r = ransac(&MatchSet::from_points(&ps, &pt, &[1.0; 6]), &cfg);
        assert!(matches!(r, Err(Error::LocalizationFailure { .. })), "{r:?}");
    }

    #[test]
    fn keypoint_loss_reference_values() {
        let ps = cloud(5, 5);
        let mut pt: Vec<_> = ps.iter().map(|p| gt().transform(p)).collect();
        assert!(keypoint_loss(&MatchSet::from_points(&ps, &pt, &[1.0; 5]), &gt()).item() < 1e-24);
        pt[2].x += 0.1;
        let l = keypoint_loss(&MatchSet::from_points(&ps, &pt, &[1.0; 5]), &gt()).item();
        assert!((l - 0.01).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_reference_values() {
        let t = gt();
        assert!(pose_loss(&PoseTensors::constant(&t), &t, 1.0).item() < 1e-24);
        let a = SE3Pose::identity();
        let b = SE3Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.3, 0.0));
        assert!((pose_loss(&PoseTensors::constant(&b), &a, 1.0).item() - 0.09).abs() < 1e-15);
        let flip = SE3Pose::new(Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)), Vector3::zeros());
        assert!((pose_loss(&PoseTensors::constant(&flip), &a, 1.0).item() - 8.0).abs() < 1e-15);
    }

    #[test]
    fn matcher_config_validation() {
        assert!(MatcherConfig::default().validate().is_ok());
        let bad = MatcherConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
