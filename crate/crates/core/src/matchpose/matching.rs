//! Soft dense matching of source keypoints into the target image.

use dnloc_tensor::Tensor;

use super::{MatchSet, MatcherConfig};
use crate::camera::StereoCamera;
use crate::error::{Error, Result};
use crate::featnet::FeatureSet;

/// Variance guard: a constant descriptor normalizes to zero instead of NaN.
pub const ZNCC_EPS: f64 = 1e-10;

/// Zero-normalized cross correlation of two equal-length descriptors.
pub fn zncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "descriptor lengths differ");
    let norm = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = (var + ZNCC_EPS).sqrt();
        x.iter().map(|v| (v - m) / s).collect::<Vec<_>>()
    };
    let (na, nb) = (norm(a), norm(b));
    na.iter().zip(&nb).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Row-wise zero-mean, unit-variance normalization of an `[N, D]` tensor.
pub fn normalize_rows(x: &Tensor) -> Tensor {
    let centered = x.sub(&x.mean_axis(1, true));
    let std = centered.square().mean_axis(1, true).add_scalar(ZNCC_EPS).sqrt();
    centered.div(&std)
}

/// `[N, M]` ZNCC between every row of `a` (`[N, D]`) and every row of `b`
/// (`[M, D]`).
pub fn zncc_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.dim(1) as f64;
    normalize_rows(a).matmul(&normalize_rows(b).t()).mul_scalar(1.0 / d)
}

/// `[N, 1]` ZNCC between corresponding rows of two `[N, D]` tensors.
pub fn zncc_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.dim(1) as f64;
    normalize_rows(a).mul(&normalize_rows(b)).sum_axis(1, true).mul_scalar(1.0 / d)
}

/// Match weight `½(zncc + 1) · s_s · ŝ_t`.
pub fn match_weight(zncc: f64, source_score: f64, target_score: f64) -> f64 {
    0.5 * (zncc + 1.0) * source_score * target_score
}

pub fn match_weight_tensor(zncc: &Tensor, source_scores: &Tensor, target_scores: &Tensor) -> Tensor {
    zncc.add_scalar(1.0).mul_scalar(0.5).mul(source_scores).mul(target_scores)
}

/// Strided target sampling grid: flat pixel indices and `[M, 2]` `(u, v)`
/// coordinates in row-major order.
pub fn target_grid(height: usize, width: usize, stride: usize) -> (Vec<usize>, Tensor) {
    let mut idx = Vec::new();
    let mut coords = Vec::new();
    for v in (0..height).step_by(stride) {
        for u in (0..width).step_by(stride) {
            idx.push(v * width + u);
            coords.extend([u as f64, v as f64]);
        }
    }
    let m = idx.len();
    (idx, Tensor::constant(vec![m, 2], coords))
}

/// Expected target coordinates `q̂ = Σ_j softmax_j(τ · zncc(d_s, d_t^j)) q_t^j`
/// over the grid rows of `grid_descriptors` (`[M, D]`) located at
/// `grid_coords` (`[M, 2]`). Returns `[N, 2]`.
pub fn soft_correspondences(source_descriptors: &Tensor, grid_descriptors: &Tensor, grid_coords: &Tensor, tau: f64) -> Tensor {
    zncc_matrix(source_descriptors, grid_descriptors)
        .mul_scalar(tau)
        .softmax(1)
        .matmul(grid_coords)
}

/// Matches every source keypoint into the target maps and lifts both ends to
/// 3-D using the bilinearly sampled disparities. Matches whose disparity on
/// either side is at or below the floor are dropped.
///
/// `source_disparity` and `target_disparity` are `[1, H, W]` maps.
pub fn match_features(
    source: &FeatureSet,
    source_disparity: &Tensor,
    target: &FeatureSet,
    target_disparity: &Tensor,
    camera: &StereoCamera,
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    cfg.validate()?;
    let (d, h, w) = (target.descriptors.dim(0), target.descriptors.dim(1), target.descriptors.dim(2));
    if source.descriptors.dim(0) != d || target_disparity.shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "matching: descriptors {:?} / {:?}, target disparity {:?}",
            source.descriptors.shape(),
            target.descriptors.shape(),
            target_disparity.shape()
        )));
    }
    let kp_s = &source.keypoints;
    let desc_s = source.descriptors.bilinear_sample(kp_s);

    let (grid_idx, grid_coords) = target_grid(h, w, cfg.stride);
    let flat = target.descriptors.reshape(&[d, h * w]).t();
    let grid_desc = flat.index_select(&grid_idx);
    let q_t = soft_correspondences(&desc_s, &grid_desc, &grid_coords, cfg.tau);

    let disp_s = source_disparity.bilinear_sample(kp_s);
    let disp_t = target_disparity.bilinear_sample(&q_t);
    let keep: Vec<usize> = {
        let (a, b) = (disp_s.data(), disp_t.data());
        (0..a.len())
            .filter(|&i| a[i] > cfg.min_disparity && b[i] > cfg.min_disparity)
            .collect()
    };

    let kp_s = kp_s.index_select(&keep);
    let q_t = q_t.index_select(&keep);
    let disp_s = disp_s.index_select(&keep);
    let disp_t = disp_t.index_select(&keep);
    let desc_s = desc_s.index_select(&keep);
    let desc_t = target.descriptors.bilinear_sample(&q_t);
    let score_s = source.scores.index_select(&keep);
    let score_t = target.dense_scores.bilinear_sample(&q_t);
    let z = zncc_rows(&desc_s, &desc_t);
    let weights = match_weight_tensor(&z, &score_s, &score_t);

    Ok(MatchSet {
        source_points: camera.backproject_tensor(&kp_s, &disp_s),
        target_points: camera.backproject_tensor(&q_t, &disp_t),
        source_keypoints: kp_s,
        target_keypoints: q_t,
        source_descriptors: desc_s,
        target_descriptors: desc_t,
        source_scores: score_s,
        target_scores: score_t,
        weights,
        source_index: keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zncc_reference_values() {
        let d = [0.3, -1.2, 2.0, 0.7, 0.1];
        assert!((zncc(&d, &d) - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        assert!((zncc(&d, &neg) + 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = d.iter().map(|v| v + 5.0).collect();
        assert!((zncc(&d, &shifted) - 1.0).abs() < 1e-9);
        assert_eq!(zncc(&[1.0; 4], &[0.2, 0.4, 0.1, 0.3]), 0.0);
    }

    #[test]
    fn zncc_tensor_agrees_with_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = zncc_matrix(&Tensor::constant(vec![3, 6], a.clone()), &Tensor::constant(vec![4, 6], b.clone())).to_vec();
        for i in 0..3 {
            for j in 0..4 {
                let e = zncc(&a[6 * i..6 * i + 6], &b[6 * j..6 * j + 6]);
                assert!((z[4 * i + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_reference_values() {
        assert_eq!(match_weight(1.0, 1.0, 1.0), 1.0);
        assert_eq!(match_weight(-1.0, 0.8, 0.9), 0.0);
        assert_eq!(match_weight(0.0, 0.5, 0.5), 0.125);
    }

    #[test]
    fn tau_to_zero_gives_grid_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (idx, coords) = target_grid(8, 12, 2);
        let grid = Tensor::constant(vec![idx.len(), 4], (0..idx.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let src = Tensor::constant(vec![1, 4], vec![0.1, 0.5, -0.3, 0.9]);
        let q = soft_correspondences(&src, &grid, &coords, 1e-12).to_vec();
        // grid columns 0,2,..,10 and rows 0,2,4,6
        assert!((q[0] - 5.0).abs() < 1e-9 && (q[1] - 3.0).abs() < 1e-9, "{q:?}");
    }

    #[test]
    fn two_equal_matches_give_midpoint() {
        let a = [1.0, -1.0, 2.0, 0.0];
        let anti: Vec<f64> = a.iter().map(|v| -v).collect();
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        for j in 0..6 {
            rows.extend_from_slice(if j == 1 || j == 4 { &a } else { &anti });
            coords.extend([j as f64 * 3.0, j as f64]);
        }
        let q = soft_correspondences(
            &Tensor::constant(vec![1, 4], a.to_vec()),
            &Tensor::constant(vec![6, 4], rows),
            &Tensor::constant(vec![6, 2], coords),
            100.0,
        )
        .to_vec();
        assert!((q[0] - 7.5).abs() < 1e-9 && (q[1] - 2.5).abs() < 1e-9, "{q:?}");
    }
}
