//! Textured street scene built from axis-aligned rectangles.
//!
//! World axes follow the camera convention: x right, y down, z forward. The
//! ground sits at `y = GROUND_Y` below a camera mounted at `y = 0`. Every
//! rectangle is tiled with square texels of constant albedo; texel centers are
//! the scene's points.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GROUND_Y: f64 = 1.5;
pub const WALL_TOP_Y: f64 = -2.5;
pub const SCENE_NEAR_Z: f64 = -3.0;
pub const SCENE_FAR_Z: f64 = 22.0;
pub const MIN_POINTS: usize = 500;
pub const MAX_POINTS: usize = 5000;

/// A textured rectangle `origin + s·axis_s + t·axis_t`, `s ∈ [0, len_s)`,
/// `t ∈ [0, len_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quad {
    pub origin: Vector3<f64>,
    pub axis_s: Vector3<f64>,
    pub axis_t: Vector3<f64>,
    pub len_s: f64,
    pub len_t: f64,
    pub normal: Vector3<f64>,
    pub texel: f64,
    pub cols: usize,
    pub rows: usize,
    /// `rows × cols` RGB albedos, row-major.
    pub albedo: Vec<[f64; 3]>,
}

/// Ray–rectangle hit.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub distance: f64,
    pub quad: usize,
    pub texel: usize,
}

impl Quad {
    fn new<R: Rng>(origin: Vector3<f64>, axis_s: Vector3<f64>, axis_t: Vector3<f64>, len_s: f64, len_t: f64, texel: f64, base: [f64; 3], rng: &mut R) -> Self {
        let cols = ((len_s / texel).round() as usize).max(1);
        let rows = ((len_t / texel).round() as usize).max(1);
        let albedo = (0..rows * cols)
            .map(|_| {
                let shade = rng.random_range(0.25..1.15);
                let mut c = [0.0; 3];
                for (k, v) in c.iter_mut().enumerate() {
                    *v = (base[k] * shade + rng.random_range(-0.08..0.08)).clamp(0.02, 1.0);
                }
                c
            })
            .collect();
        Self {
            origin,
            axis_s,
            axis_t,
            len_s,
            len_t,
            normal: axis_s.cross(&axis_t).normalize(),
            texel: len_s / cols as f64,
            cols,
            rows,
            albedo,
        }
    }

    /// Ray parameter `λ` of the hit point `o + λ·d` and the texel index.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let denom = self.normal.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = self.normal.dot(&(self.origin - o)) / denom;
        if lambda <= 1e-9 {
            return None;
        }
        let rel = o + lambda * d - self.origin;
        let (s, t) = (rel.dot(&self.axis_s), rel.dot(&self.axis_t));
        if !(0.0..self.len_s).contains(&s) || !(0.0..self.len_t).contains(&t) {
            return None;
        }
        let tex_t = self.len_t / self.rows as f64;
        let col = ((s / self.texel) as usize).min(self.cols - 1);
        let row = ((t / tex_t) as usize).min(self.rows - 1);
        Some((lambda, row * self.cols + col))
    }

    pub fn texel_center(&self, index: usize) -> Vector3<f64> {
        let (row, col) = (index / self.cols, index % self.cols);
        let tex_t = self.len_t / self.rows as f64;
        self.origin + (col as f64 + 0.5) * self.texel * self.axis_s + (row as f64 + 0.5) * tex_t * self.axis_t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub quads: Vec<Quad>,
    /// Half-width of the street (x of the side walls).
    pub half_width: f64,
}

impl Scene {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7363_656e_65);
        let hw = rng.random_range(3.5..5.0);
        let texel = rng.random_range(0.5..0.6);
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        let depth = SCENE_FAR_Z - SCENE_NEAR_Z;
        let height = GROUND_Y - WALL_TOP_Y;
        let mut quads = Vec::new();

        let asphalt = [0.45, 0.43, 0.40];
        quads.push(Quad::new(
            Vector3::new(-hw, GROUND_Y, SCENE_NEAR_Z),
            x,
            z,
            2.0 * hw,
            depth,
            texel,
            asphalt,
            &mut rng,
        ));
        let wall = |rng: &mut ChaCha8Rng| [rng.random_range(0.4..0.9), rng.random_range(0.35..0.8), rng.random_range(0.3..0.75)];
        // left wall faces +x, right wall faces −x
        let base = wall(&mut rng);
        quads.push(Quad::new(Vector3::new(-hw, WALL_TOP_Y, SCENE_FAR_Z), -z, y, depth, height, texel, base, &mut rng));
        let base = wall(&mut rng);
        quads.push(Quad::new(Vector3::new(hw, WALL_TOP_Y, SCENE_NEAR_Z), z, y, depth, height, texel, base, &mut rng));
        let base = wall(&mut rng);
        quads.push(Quad::new(Vector3::new(-hw, WALL_TOP_Y, SCENE_FAR_Z), x, y, 2.0 * hw, height, texel, base, &mut rng));

        // Boxes and panels along the sidewalks, clear of the driving lane.
        let n_objects = rng.random_range(6..=10);
        for _ in 0..n_objects {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let w = rng.random_range(0.8..1.8);
            let h = rng.random_range(0.8..2.5);
            let d = rng.random_range(0.3..1.5);
            let inner = rng.random_range(1.6..(hw - 0.5).max(1.7));
            let z0 = rng.random_range(3.0..SCENE_FAR_Z - 3.0);
            let top = GROUND_Y - h;
            let base = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
            // x extent [x_lo, x_hi] on the chosen side
            let (x_lo, x_hi) = if side > 0.0 { (inner, inner + w) } else { (-inner - w, -inner) };
            // front face (normal −z)
            quads.push(Quad::new(Vector3::new(x_hi, top, z0), -x, y, w, h, texel, base, &mut rng));
            // face toward the street (normal −x on the right, +x on the left)
            let lane_face = if side > 0.0 {
                Quad::new(Vector3::new(x_lo, top, z0 + d), -z, y, d, h, texel, base, &mut rng)
            } else {
                Quad::new(Vector3::new(x_hi, top, z0), z, y, d, h, texel, base, &mut rng)
            };
            quads.push(lane_face);
        }
        Self {
            seed,
            quads,
            half_width: hw,
        }
    }

    pub fn point_count(&self) -> usize {
        self.quads.iter().map(|q| q.rows * q.cols).sum()
    }

    /// Texel centers of every quad, in quad order.
    pub fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.quads
            .iter()
            .flat_map(|q| (0..q.rows * q.cols).map(move |i| q.texel_center(i)))
    }

    /// Nearest hit along a ray, ties broken by quad order.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (qi, q) in self.quads.iter().enumerate() {
            if let Some((distance, texel)) = q.intersect(o, d) {
                if best.is_none_or(|b| distance < b.distance) {
                    best = Some(Hit { distance, quad: qi, texel });
                }
            }
        }
        best
    }
}
