//! Localization metrics, evaluation reports and artifact dumps.
//!
//! Errors are measured in the target camera frame: `Δx` is the longitudinal
//! (forward, camera z) translation error, `Δy` the lateral (camera x) error,
//! and `Δθ` the yaw (rotation about the vertical camera y axis) of `C Ĉᵀ`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dnloc_tensor::Tensor;

use crate::camera::StereoCamera;
use crate::error::{io_err, Error, Result};
use crate::matchpose::{MatcherConfig, SE3Pose};
use crate::pipeline::Pipeline;
use crate::synthdata::{io, FramePair};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrors {
    pub dx: f64,
    pub dy: f64,
    pub dtheta_deg: f64,
}

/// Yaw of a rotation about the camera y axis, in radians.
pub fn yaw(c: &nalgebra::Matrix3<f64>) -> f64 {
    c[(0, 2)].atan2(c[(2, 2)])
}

pub fn pose_errors(estimate: &SE3Pose, gt: &SE3Pose) -> PoseErrors {
    let e = gt.rotation * estimate.rotation.transpose();
    PoseErrors {
        dx: (gt.translation.z - estimate.translation.z).abs(),
        dy: (gt.translation.x - estimate.translation.x).abs(),
        dtheta_deg: yaw(&e).to_degrees().abs(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub pair_id: String,
    /// `None` when localization failed.
    pub errors: Option<PoseErrors>,
    pub inliers: usize,
    pub status: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Stat {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairResult>,
    pub failures: usize,
    pub dx: Stat,
    pub dy: Stat,
    pub dtheta: Stat,
    pub inliers: Stat,
}

pub const PAIR_HEADER: &str = "pair_id,dx_m,dy_m,dtheta_deg,inliers,status";
pub const AGGREGATE_HEADER: &str =
    "pairs,failures,mean_dx,median_dx,mean_dy,median_dy,mean_dtheta,median_dtheta,mean_inliers,median_inliers";

impl EvalReport {
    /// Aggregates successful rows; failed rows only count towards `failures`.
    pub fn from_rows(rows: Vec<PairResult>) -> Self {
        let ok: Vec<(&PoseErrors, usize)> = rows.iter().filter_map(|r| r.errors.as_ref().map(|e| (e, r.inliers))).collect();
        let col = |f: fn(&PoseErrors) -> f64| ok.iter().map(|(e, _)| f(e)).collect::<Vec<_>>();
        Self {
            failures: rows.len() - ok.len(),
            dx: Stat::of(&col(|e| e.dx)),
            dy: Stat::of(&col(|e| e.dy)),
            dtheta: Stat::of(&col(|e| e.dtheta_deg)),
            inliers: Stat::of(&ok.iter().map(|(_, n)| *n as f64).collect::<Vec<_>>()),
            rows,
        }
    }

    pub fn aggregate_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.rows.len(),
            self.failures,
            self.dx.mean,
            self.dx.median,
            self.dy.mean,
            self.dy.median,
            self.dtheta.mean,
            self.dtheta.median,
            self.inliers.mean,
            self.inliers.median
        )
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(PAIR_HEADER);
        s.push('\n');
        for r in &self.rows {
            match &r.errors {
                Some(e) => writeln!(s, "{},{},{},{},{},{}", r.pair_id, e.dx, e.dy, e.dtheta_deg, r.inliers, r.status),
                None => writeln!(s, "{},,,,{},{}", r.pair_id, r.inliers, r.status),
            }
            .expect("writing to a string");
        }
        s
    }

    pub fn write_pairs_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.pairs_csv()).map_err(io_err(path))
    }
}

/// Localizes every pair in order. Pairs where matching, RANSAC or the solve
/// fail are reported as failures rather than aborting the run.
pub fn evaluate_pairs(pipeline: &Pipeline, pairs: &[FramePair], cam: &StereoCamera, cfg: &MatcherConfig) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let row = match pipeline.localize(pair, cam, cfg) {
            Ok(loc) => PairResult {
                pair_id: pair.id.clone(),
                errors: Some(pose_errors(&loc.pose, &pair.pose)),
                inliers: loc.inliers,
                status: "ok".into(),
            },
            Err(
                e @ (Error::DegenerateMatchSet { .. } | Error::DegenerateGeometry(_) | Error::LocalizationFailure { .. }),
            ) => PairResult {
                pair_id: pair.id.clone(),
                errors: None,
                inliers: 0,
                status: format!("failed: {}", e.to_string().replace(',', ";")),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let report = EvalReport::from_rows(rows);
    if !report.rows.is_empty() && report.failures == report.rows.len() {
        return Err(Error::Evaluation(format!("all {} pairs failed to localize", report.failures)));
    }
    Ok(report)
}

/// Rescales values linearly onto `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

fn image_bytes(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let d = t.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for k in 0..3 {
            let ch = if c == 1 { 0 } else { k };
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Writes source, target and (if present) transformed target images, and the
/// min-max normalized detector logits of every image FeatNet sees. Returns
/// the written paths.
pub fn dump_artifacts(pipeline: &Pipeline, pair: &FramePair, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    pipeline.without_grad(|p| {
        let src = pair.source.image_tensor();
        let tgt = pair.target.image_tensor();
        let mut written = Vec::new();
        let mut save = |name: &str, t: &Tensor| -> Result<()> {
            let path = out_dir.join(name);
            io::write_ppm(&path, t.dim(2), t.dim(1), &image_bytes(t))?;
            written.push(path);
            Ok(())
        };
        save("source.ppm", &src)?;
        save("target.ppm", &tgt)?;
        let logits = |img: &Tensor| -> Result<Tensor> {
            let l = p.featnet.detect(img)?.detector_logits;
            Ok(Tensor::constant(l.shape().to_vec(), min_max_normalize(&l.to_vec())))
        };
        save("source_logits.ppm", &logits(&src)?)?;
        save("target_logits.ppm", &logits(&tgt)?)?;
        if let Some(t) = &p.transnet {
            let y = t.forward(&tgt)?;
            save("transformed.ppm", &y)?;
            save("transformed_logits.ppm", &logits(&y)?)?;
        }
        Ok(written)
    })
}
