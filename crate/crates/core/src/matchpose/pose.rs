use dnloc_tensor::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid transform `T_ts` mapping source-frame points into the target frame:
/// `p_t = C p_s + r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// On-disk form: row-major rotation and translation plus the frame label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub frame: String,
}

pub const POSE_FRAME: &str = "T_ts maps source-frame points to the target frame";

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Rotation from yaw (about camera y), pitch (about x) and roll (about z),
    /// all in radians, applied as `R_y(yaw) · R_x(pitch) · R_z(roll)`.
    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
        Self::new(*r.matrix(), translation)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_array(&self, p: [f64; 3]) -> [f64; 3] {
        self.transform(&Vector3::from(p)).into()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> SE3Pose {
        let ct = self.rotation.transpose();
        SE3Pose::new(ct, -(ct * self.translation))
    }

    /// Rotation angle of `C` in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Orthonormality and determinant residuals.
    pub fn rotation_residuals(&self) -> (f64, f64) {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        (orth, (self.rotation.determinant() - 1.0).abs())
    }

    pub fn rotation_tensor(&self) -> Tensor {
        Tensor::constant(vec![3, 3], row_major(&self.rotation).to_vec())
    }

    pub fn translation_tensor(&self) -> Tensor {
        Tensor::constant(vec![3], self.translation.as_slice().to_vec())
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            rotation: row_major(&self.rotation),
            translation: [self.translation.x, self.translation.y, self.translation.z],
            frame: POSE_FRAME.to_string(),
        }
    }

    pub fn from_record(r: &PoseRecord) -> Self {
        Self::new(Matrix3::from_row_slice(&r.rotation), Vector3::from(r.translation))
    }
}

pub fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[(i, j)];
        }
    }
    out
}

/// Differentiable pose estimate: `rotation` is `[3, 3]`, `translation` `[3]`.
#[derive(Clone, Debug)]
pub struct PoseTensors {
    pub rotation: Tensor,
    pub translation: Tensor,
}

impl PoseTensors {
    pub fn to_pose(&self) -> SE3Pose {
        let r = self.rotation.to_vec();
        let t = self.translation.to_vec();
        SE3Pose::new(Matrix3::from_row_slice(&r), Vector3::new(t[0], t[1], t[2]))
    }

    pub fn constant(pose: &SE3Pose) -> Self {
        Self {
            rotation: pose.rotation_tensor(),
            translation: pose.translation_tensor(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = SE3Pose::from_yaw_pitch_roll(0.3, -0.05, 0.02, Vector3::new(0.4, -0.1, 1.2));
        let e = p.compose(&p.inverse());
        assert!((e.rotation - Matrix3::identity()).norm() < 1e-14);
        assert!(e.translation.norm() < 1e-14);
        let (orth, det) = p.rotation_residuals();
        assert!(orth < 1e-14 && det < 1e-14);
    }

    #[test]
    fn positive_yaw_turns_forward_axis_toward_right() {
        let p = SE3Pose::from_yaw_pitch_roll(std::f64::consts::FRAC_PI_2, 0.0, 0.0, Vector3::zeros());
        let z = p.transform(&Vector3::z());
        assert!((z - Vector3::x()).norm() < 1e-15);
        assert!((p.angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn record_roundtrip() {
        let p = SE3Pose::from_yaw_pitch_roll(0.1, 0.02, -0.01, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(SE3Pose::from_record(&p.to_record()), p);
    }
}
