//! Ray-cast rendering of a [`Scene`] into a left RGB image plus dense
//! disparity, and the photometric night model.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scene::Scene;
use crate::camera::StereoCamera;
use crate::matchpose::SE3Pose;

/// Rendered frame: interleaved 8-bit RGB and per-pixel disparity (0 where the
/// ray escapes the scene).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub disparity: Vec<f32>,
}

/// Linear-intensity image before quantization, `H × W × 3`.
#[derive(Clone, Debug)]
pub struct Radiance {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl Radiance {
    pub fn mean(&self) -> f64 {
        self.rgb.iter().sum::<f64>() / self.rgb.len() as f64
    }

    pub fn quantize(&self) -> Vec<u8> {
        self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lamp {
    pub u: f64,
    pub v: f64,
    /// Gaussian radius in pixels.
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NightParams {
    pub gain: f64,
    /// Per-channel multiplicative tint.
    pub tint: [f64; 3],
    pub noise_sigma: f64,
    pub lamps: Vec<Lamp>,
}

impl NightParams {
    pub fn sample<R: Rng>(rng: &mut R, width: usize, height: usize) -> Self {
        let gain = rng.random_range(0.1..=0.3);
        let tint = [
            1.0 + rng.random_range(-0.25..=0.25),
            1.0 + rng.random_range(-0.25..=0.25),
            1.0 + rng.random_range(-0.25..=0.25),
        ];
        let noise_sigma = rng.random_range(0.01..=0.05);
        let lamps = (0..rng.random_range(1..=3))
            .map(|_| Lamp {
                u: rng.random_range(0.0..width as f64),
                v: rng.random_range(0.0..height as f64 * 0.6),
                radius: rng.random_range(3.0..9.0),
                intensity: rng.random_range(0.25..0.6),
            })
            .collect();
        Self {
            gain,
            tint,
            noise_sigma,
            lamps,
        }
    }

    /// Gain only: no tint, noise or lamps.
    pub fn gain_only(gain: f64) -> Self {
        Self {
            gain,
            tint: [1.0; 3],
            noise_sigma: 0.0,
            lamps: Vec::new(),
        }
    }
}

const LAMP_COLOR: [f64; 3] = [1.0, 0.85, 0.55];
const AMBIENT: f64 = 0.35;

fn sun() -> Vector3<f64> {
    Vector3::new(0.45, -0.75, 0.5).normalize()
}

fn sky(v: f64, height: usize) -> [f64; 3] {
    let t = v / height as f64;
    [0.55 + 0.2 * t, 0.7 + 0.15 * t, 0.95]
}

/// Camera pose `T_wc` (camera → world) and the world-frame ray through pixel
/// `(u, v)`, scaled so its camera-frame z component is 1.
fn ray(cam: &StereoCamera, pose: &SE3Pose, u: f64, v: f64) -> Vector3<f64> {
    let d = Vector3::new((u - cam.cu) / cam.fu, (v - cam.cv) / cam.fv, 1.0);
    pose.rotation * d
}

/// Day render. `camera_to_world` is the camera pose in the scene.
pub fn render_day(scene: &Scene, camera_to_world: &SE3Pose, cam: &StereoCamera) -> (Radiance, Vec<f32>) {
    let (w, h) = (cam.width, cam.height);
    let origin = camera_to_world.translation;
    let sun = sun();
    let mut rgb = vec![0.0; w * h * 3];
    let mut disparity = vec![0.0f32; w * h];
    const SUB: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (u as f64, v as f64);
            // the scaled ray has unit camera depth, so the hit parameter is z
            if let Some(hit) = scene.cast(&origin, &ray(cam, camera_to_world, uf, vf)) {
                disparity[v * w + u] = (cam.fu * cam.baseline / hit.distance) as f32;
            }
            let mut acc = [0.0; 3];
            for (du, dv) in SUB {
                let c = match scene.cast(&origin, &ray(cam, camera_to_world, uf + du, vf + dv)) {
                    Some(hit) => {
                        let q = &scene.quads[hit.quad];
                        let shade = AMBIENT + (1.0 - AMBIENT) * q.normal.dot(&sun).abs();
                        let a = q.albedo[hit.texel];
                        [a[0] * shade, a[1] * shade, a[2] * shade]
                    }
                    None => sky(vf + dv, h),
                };
                for k in 0..3 {
                    acc[k] += 0.25 * c[k];
                }
            }
            rgb[(v * w + u) * 3..(v * w + u) * 3 + 3].copy_from_slice(&acc);
        }
    }
    (
        Radiance {
            width: w,
            height: h,
            rgb,
        },
        disparity,
    )
}

/// Applies the night model to a day radiance image: gain, tint, lamp glow and
/// additive Gaussian noise, in that order.
pub fn apply_night<R: Rng>(day: &Radiance, params: &NightParams, rng: &mut R) -> Radiance {
    let (w, h) = (day.width, day.height);
    let mut rgb = day.rgb.clone();
    let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("positive sigma"));
    for v in 0..h {
        for u in 0..w {
            let glow: f64 = params
                .lamps
                .iter()
                .map(|l| {
                    let r2 = (u as f64 - l.u).powi(2) + (v as f64 - l.v).powi(2);
                    l.intensity * (-r2 / (2.0 * l.radius * l.radius)).exp()
                })
                .sum();
            for k in 0..3 {
                let i = (v * w + u) * 3 + k;
                let mut x = rgb[i] * params.gain * params.tint[k] + glow * LAMP_COLOR[k];
                if let Some(n) = &noise {
                    x += n.sample(rng);
                }
                rgb[i] = x;
            }
        }
    }
    Radiance { width: w, height: h, rgb }
}

/// Scene points visible (unoccluded, in front by at least 0.5 m, inside the
/// image) from a camera pose.
pub fn visible_points(scene: &Scene, camera_to_world: &SE3Pose, cam: &StereoCamera) -> usize {
    let world_to_camera = camera_to_world.inverse();
    let origin = camera_to_world.translation;
    scene
        .points()
        .filter(|p| {
            let pc = world_to_camera.transform(p);
            if pc.z <= 0.5 {
                return false;
            }
            let u = cam.fu * pc.x / pc.z + cam.cu;
            let v = cam.fv * pc.y / pc.z + cam.cv;
            if !(0.0..=(cam.width - 1) as f64).contains(&u) || !(0.0..=(cam.height - 1) as f64).contains(&v) {
                return false;
            }
            let d = ray(cam, camera_to_world, u, v);
            scene.cast(&origin, &d).is_some_and(|hit| hit.distance > pc.z - 1e-6)
        })
        .count()
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>, disparity: Vec<f32>) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        assert_eq!(disparity.len(), width * height);
        Self {
            width,
            height,
            rgb,
            disparity,
        }
    }

    /// `[3, H, W]` image in `[0, 1]`.
    pub fn image_tensor(&self) -> dnloc_tensor::Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for i in 0..w * h {
            for k in 0..3 {
                out[k * w * h + i] = self.rgb[i * 3 + k] as f64 / 255.0;
            }
        }
        dnloc_tensor::Tensor::constant(vec![3, h, w], out)
    }

    /// `[1, H, W]` disparity map.
    pub fn disparity_tensor(&self) -> dnloc_tensor::Tensor {
        dnloc_tensor::Tensor::constant(
            vec![1, self.height, self.width],
            self.disparity.iter().map(|&d| d as f64).collect(),
        )
    }

    /// Bilinearly interpolated disparity at `(u, v)`, clamped to the image
    /// like [`Tensor::bilinear_sample`](dnloc_tensor::Tensor::bilinear_sample).
    pub fn disparity_at(&self, u: f64, v: f64) -> f64 {
        let (w, h) = (self.width, self.height);
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
        let (a, b) = (u - u0 as f64, v - v0 as f64);
        let d = |x: usize, y: usize| self.disparity[y * w + x] as f64;
        (1.0 - a) * (1.0 - b) * d(u0, v0) + a * (1.0 - b) * d(u1, v0) + (1.0 - a) * b * d(u0, v1) + a * b * d(u1, v1)
    }

    pub fn mean_intensity(&self) -> f64 {
        self.rgb.iter().map(|&b| b as f64).sum::<f64>() / (255.0 * self.rgb.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> StereoCamera {
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

    #[test]
    fn ground_disparity_follows_depth() {
        let scene = Scene::generate(0);
        let c = cam();
        let (_, disp) = render_day(&scene, &SE3Pose::identity(), &c);
        // bottom row center pixel: ray y/z = (63 − 32)/80 hits the ground at z = 1.5·80/31
        let z = super::super::scene::GROUND_Y * c.fv / 31.0;
        let expected = c.fu * c.baseline / z;
        assert!((disp[63 * 96 + 48] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn day_render_is_deterministic() {
        let scene = Scene::generate(5);
        let pose = SE3Pose::from_yaw_pitch_roll(0.05, 0.0, 0.0, Vector3::new(0.3, 0.0, 2.0));
        let (a, da) = render_day(&scene, &pose, &cam());
        let (b, db) = render_day(&scene, &pose, &cam());
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(da, db);
    }

    #[test]
    fn night_gain_scales_mean_intensity() {
        let scene = Scene::generate(2);
        let (day, _) = render_day(&scene, &SE3Pose::identity(), &cam());
        let night = apply_night(&day, &NightParams::gain_only(0.2), &mut ChaCha8Rng::seed_from_u64(0));
        let ratio = night.mean() / day.mean();
        assert!((ratio - 0.2).abs() < 0.04, "ratio {ratio}");
    }

    #[test]
    fn sampled_night_params_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p = NightParams::sample(&mut rng, 96, 64);
            assert!((0.1..=0.3).contains(&p.gain));
            assert!((0.01..=0.05).contains(&p.noise_sigma));
            assert!((1..=3).contains(&p.lamps.len()));
        }
    }

    #[test]
    fn disparity_interpolation_matches_tensor_sampling() {
        let disparity: Vec<f32> = (0..12).map(|i| (i * i) as f32 * 0.25).collect();
        let f = Frame::new(4, 3, vec![0; 36], disparity);
        let pts = [(0.0, 0.0), (1.5, 0.25), (3.0, 2.0), (2.7, 1.9), (-1.0, 5.0)];
        let coords = dnloc_tensor::Tensor::constant(vec![5, 2], pts.iter().flat_map(|&(u, v)| [u, v]).collect());
        let t = f.disparity_tensor().bilinear_sample(&coords).to_vec();
        for (k, &(u, v)) in pts.iter().enumerate() {
            assert!((f.disparity_at(u, v) - t[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn origin_view_sees_enough_points() {
        let scene = Scene::generate(1);
        assert!(visible_points(&scene, &SE3Pose::identity(), &cam()) >= 50);
    }
}
