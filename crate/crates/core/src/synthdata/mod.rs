//! Synthetic day/night stereo dataset: generation, on-disk layout, loading,
//! and a geometric consistency check.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! pairs/<id>/src.ppm       day (source) left image
//! pairs/<id>/tgt.ppm       night (target) left image
//! pairs/<id>/src_disp.bin  source disparity
//! pairs/<id>/tgt_disp.bin  target disparity
//! pairs/<id>/pose.json     T_ts: source-frame points → target frame
//! ```

pub mod io;
mod render;
mod scene;

pub use render::{apply_night, render_day, visible_points, Frame, Lamp, NightParams, Radiance};
pub use scene::{Hit, Quad, Scene, GROUND_Y, MAX_POINTS, MIN_POINTS};

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::StereoCamera;
use crate::error::{io_err, Error, Result};
use crate::matchpose::SE3Pose;

pub const FORMAT_VERSION: u32 = 1;
const MAX_POSE_ATTEMPTS: usize = 200;

pub fn default_camera() -> StereoCamera {
    StereoCamera {
        fu: 80.0,
        fv: 80.0,
        cu: 48.0,
        cv: 32.0,
        baseline: 0.4,
        width: 96,
        height: 64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub camera: StereoCamera,
    /// Number of distinct scenes the pairs are spread over.
    pub scenes: usize,
    /// Minimum visible scene points per frame.
    pub min_visible: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 40,
            seed: 0,
            camera: default_camera(),
            scenes: 8,
            min_visible: 50,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.camera.width % 16 != 0 || self.camera.height % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 16",
                self.camera.width, self.camera.height
            )));
        }
        if self.scenes == 0 {
            return Err(Error::Config("at least one scene is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub camera: StereoCamera,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A day source frame, a night target frame and the ground-truth `T_ts`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub id: String,
    pub source: Frame,
    pub target: Frame,
    pub pose: SE3Pose,
}

/// Source camera pose in the scene: anywhere on the first stretch of the
/// street, heading roughly along it.
fn sample_source_pose<R: Rng>(rng: &mut R) -> SE3Pose {
    SE3Pose::from_yaw_pitch_roll(
        rng.random_range(-10f64..=10.0).to_radians(),
        0.0,
        0.0,
        Vector3::new(rng.random_range(-1.2..=1.2), 0.0, rng.random_range(0.0..=6.0)),
    )
}

/// Relative motion of the target camera expressed in the source frame.
fn sample_motion<R: Rng>(rng: &mut R) -> SE3Pose {
    SE3Pose::from_yaw_pitch_roll(
        rng.random_range(-5f64..=5.0).to_radians(),
        rng.random_range(-1f64..=1.0).to_radians(),
        rng.random_range(-1f64..=1.0).to_radians(),
        Vector3::new(rng.random_range(-0.8..=0.8), rng.random_range(-0.05..=0.05), rng.random_range(-1.0..=1.0)),
    )
}

/// Renders one pair. The generator is a pure function of `(seed, index)`.
pub fn generate_pair(id: String, scene: &Scene, cam: &StereoCamera, seed: u64, min_visible: usize) -> Result<FramePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_seen = 0;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let world_src = sample_source_pose(&mut rng);
        let motion = sample_motion(&mut rng);
        let world_tgt = world_src.compose(&motion);
        let seen = visible_points(scene, &world_src, cam).min(visible_points(scene, &world_tgt, cam));
        if seen < min_visible {
            best_seen = best_seen.max(seen);
            continue;
        }
        let (day_src, disp_src) = render_day(scene, &world_src, cam);
        let (day_tgt, disp_tgt) = render_day(scene, &world_tgt, cam);
        let params = NightParams::sample(&mut rng, cam.width, cam.height);
        let night = apply_night(&day_tgt, &params, &mut rng);
        return Ok(FramePair {
            id,
            source: Frame::new(cam.width, cam.height, day_src.quantize(), disp_src),
            target: Frame::new(cam.width, cam.height, night.quantize(), disp_tgt),
            pose: motion.inverse(),
        });
    }
    Err(Error::TooFewVisiblePoints { visible: best_seen })
}

fn pair_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ 0x5041_4952
}

pub fn pair_id(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train_{index:05}"),
        Split::Test => format!("test_{index:05}"),
    }
}

/// Generates every pair of a dataset in memory (train split first).
pub fn generate_pairs(cfg: &DatasetConfig) -> Result<Vec<FramePair>> {
    cfg.validate()?;
    let scenes: Vec<Scene> = (0..cfg.scenes)
        .map(|i| Scene::generate(cfg.seed.wrapping_add(1000 * i as u64 + 1)))
        .collect();
    let ids = (0..cfg.train)
        .map(|i| pair_id(Split::Train, i))
        .chain((0..cfg.test).map(|i| pair_id(Split::Test, i)));
    ids.enumerate()
        .map(|(k, id)| generate_pair(id, &scenes[k % scenes.len()], &cfg.camera, pair_seed(cfg.seed, k), cfg.min_visible))
        .collect()
}

/// Writes a complete dataset to `root`.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Manifest> {
    let pairs = generate_pairs(cfg)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        camera: cfg.camera,
        width: cfg.camera.width,
        height: cfg.camera.height,
        seed: cfg.seed,
        splits: Splits {
            train: pairs[..cfg.train].iter().map(|p| p.id.clone()).collect(),
            test: pairs[cfg.train..].iter().map(|p| p.id.clone()).collect(),
        },
    };
    fs::create_dir_all(root.join("pairs")).map_err(io_err(root))?;
    for p in &pairs {
        write_pair(root, p)?;
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn write_pair(root: &Path, pair: &FramePair) -> Result<()> {
    let dir = root.join("pairs").join(&pair.id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (s, t) = (&pair.source, &pair.target);
    io::write_ppm(&dir.join("src.ppm"), s.width, s.height, &s.rgb)?;
    io::write_ppm(&dir.join("tgt.ppm"), t.width, t.height, &t.rgb)?;
    io::write_disparity(&dir.join("src_disp.bin"), s.width, s.height, &s.disparity)?;
    io::write_disparity(&dir.join("tgt_disp.bin"), t.width, t.height, &t.disparity)?;
    io::write_pose(&dir.join("pose.json"), &pair.pose)
}

/// Opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path,
                message: format!("unsupported format version {}", manifest.format_version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn camera(&self) -> StereoCamera {
        self.manifest.camera
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Test => &self.manifest.splits.test,
        }
    }

    pub fn load_pair(&self, id: &str) -> Result<FramePair> {
        let dir = self.root.join("pairs").join(id);
        let (w, h) = (self.manifest.width, self.manifest.height);
        let frame = |img: &str, disp: &str| -> Result<Frame> {
            let (iw, ih, rgb) = io::read_ppm(&dir.join(img))?;
            let (dw, dh, d) = io::read_disparity(&dir.join(disp))?;
            if (iw, ih) != (w, h) || (dw, dh) != (w, h) {
                return Err(Error::Format {
                    path: dir.clone(),
                    message: format!("frame size {iw}x{ih} / disparity {dw}x{dh} differs from manifest {w}x{h}"),
                });
            }
            Ok(Frame::new(w, h, rgb, d))
        };
        Ok(FramePair {
            id: id.to_string(),
            source: frame("src.ppm", "src_disp.bin")?,
            target: frame("tgt.ppm", "tgt_disp.bin")?,
            pose: io::read_pose(&dir.join("pose.json"))?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FramePair>> {
        self.ids(split).iter().map(|id| self.load_pair(id)).collect()
    }
}

/// Outcome of [`check_consistency`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Consistency {
    /// Source pixels with valid disparity.
    pub valid: usize,
    /// Of those, pixels found co-visible in the target.
    pub covisible: usize,
    /// Largest round-trip reprojection error over co-visible pixels (px).
    pub max_error: f64,
}

/// Lifts every source pixel with its stored disparity, moves it into the
/// target frame with `T_ts` and compares against the target's own disparity.
///
/// A pixel counts as co-visible when it lands inside the target image on a
/// smooth, planar disparity patch (2×2 spread below 1 px, and the surrounding
/// 4×4 block affine in pixel coordinates, as disparity is across a plane)
/// that is not nearer than the
/// transported point by more than 10 %. For co-visible pixels the target
/// observation is lifted, transported back and projected into the source;
/// the error is the pixel distance to where it started.
pub fn check_consistency(pair: &FramePair, cam: &StereoCamera, min_disparity: f64) -> Consistency {
    let (w, h) = (pair.source.width, pair.source.height);
    let back = pair.pose.inverse();
    let disp_t = &pair.target.disparity;
    let mut out = Consistency::default();
    for v in 0..h {
        for u in 0..w {
            let d = pair.source.disparity[v * w + u] as f64;
            if d <= min_disparity {
                continue;
            }
            out.valid += 1;
            let obs = crate::camera::ImageObservation { u: u as f64, v: v as f64, d };
            let Ok(p) = cam.backproject_with_floor(&obs, min_disparity) else { continue };
            let Ok(y) = cam.project(pair.pose.transform_array(p)) else { continue };
            if !(0.0..(w - 1) as f64).contains(&y.u) || !(0.0..(h - 1) as f64).contains(&y.v) {
                continue;
            }
            let (x0, y0) = (y.u.floor() as usize, y.v.floor() as usize);
            let (fx, fy) = (y.u - x0 as f64, y.v - y0 as f64);
            if !affine_neighborhood(disp_t, w, h, x0, y0) {
                continue;
            }
            let at = |yy: usize, xx: usize| disp_t[yy * w + xx] as f64;
            let patch = [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)];
            let lo = patch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo <= min_disparity || hi - lo >= 1.0 {
                continue;
            }
            let dt = (1.0 - fy) * ((1.0 - fx) * patch[0] + fx * patch[1]) + fy * ((1.0 - fx) * patch[2] + fx * patch[3]);
            if dt > 1.1 * y.d {
                continue;
            }
            out.covisible += 1;
            let obs_t = crate::camera::ImageObservation { u: y.u, v: y.v, d: dt };
            let err = cam
                .backproject_with_floor(&obs_t, min_disparity)
                .and_then(|q| cam.project(back.transform_array(q)))
                .map(|z| ((z.u - u as f64).powi(2) + (z.v - v as f64).powi(2)).sqrt())
                .unwrap_or(f64::INFINITY);
            out.max_error = out.max_error.max(err);
        }
    }
    out
}

/// Whether the 4×4 block of `map` around the cell with top-left `(x0, y0)` is
/// an affine function of pixel coordinates (all second differences vanish).
fn affine_neighborhood(map: &[f32], w: usize, h: usize, x0: usize, y0: usize) -> bool {
    const TOL: f64 = 1e-3;
    if x0 == 0 || y0 == 0 || x0 + 2 >= w || y0 + 2 >= h {
        return false;
    }
    let at = |dy: usize, dx: usize| map[(y0 - 1 + dy) * w + x0 - 1 + dx] as f64;
    for a in 0..4 {
        for b in 0..2 {
            if (at(a, b) - 2.0 * at(a, b + 1) + at(a, b + 2)).abs() > TOL
                || (at(b, a) - 2.0 * at(b + 1, a) + at(b + 2, a)).abs() > TOL
            {
                return false;
            }
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            if (at(a, b) + at(a + 1, b + 1) - at(a, b + 1) - at(a + 1, b)).abs() > TOL {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 3,
            test: 2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn pairs_respect_motion_bounds_and_are_consistent() {
        let cam = default_camera();
        for p in generate_pairs(&small()).unwrap() {
            assert!(p.pose.translation.norm() <= 2.0);
            assert!(p.pose.angle().to_degrees() <= 15.0);
            let c = check_consistency(&p, &cam, 0.1);
            assert!(c.max_error < 0.5, "{}: {c:?}", p.id);
            assert!(c.covisible as f64 > 0.3 * c.valid as f64, "{}: {c:?}", p.id);
        }
    }

    #[test]
    fn night_target_is_darker_than_day_source() {
        for p in generate_pairs(&small()).unwrap() {
            assert!(p.target.mean_intensity() < 0.6 * p.source.mean_intensity(), "{}", p.id);
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.camera, cfg.camera);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        let mem = generate_pairs(&cfg).unwrap();
        let disk: Vec<_> = ds.load_split(Split::Train).unwrap().into_iter().chain(ds.load_split(Split::Test).unwrap()).collect();
        assert_eq!(mem, disk);
    }

    #[test]
    fn open_reports_missing_manifest_path() {
        let dir = tempfile::tempdir().unwrap();
        match Dataset::open(dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("manifest.json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
