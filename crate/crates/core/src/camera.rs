//! Rectified stereo camera: 3-D point ↔ (u, v, disparity).

use dnloc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disparity floor below which a point is treated as being at infinity.
pub const DEFAULT_MIN_DISPARITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoCamera {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    /// Baseline in meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

/// Left-image coordinates plus disparity `d = u_l − u_r`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageObservation {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl StereoCamera {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fu > 0.0
            && self.fv > 0.0
            && self.baseline > 0.0
            && self.cu >= 0.0
            && self.cu < self.width as f64
            && self.cv >= 0.0
            && self.cv < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid stereo camera {self:?}")))
        }
    }

    pub fn project(&self, p: [f64; 3]) -> Result<ImageObservation> {
        let [x, y, z] = p;
        if z <= 0.0 {
            return Err(Error::BehindCamera { z });
        }
        Ok(ImageObservation {
            u: self.fu * x / z + self.cu,
            v: self.fv * y / z + self.cv,
            d: self.fu * self.baseline / z,
        })
    }

    pub fn backproject(&self, y: &ImageObservation) -> Result<[f64; 3]> {
        self.backproject_with_floor(y, DEFAULT_MIN_DISPARITY)
    }

    pub fn backproject_with_floor(&self, y: &ImageObservation, min_disparity: f64) -> Result<[f64; 3]> {
        if y.d <= min_disparity {
            return Err(Error::NearInfiniteDepth {
                disparity: y.d,
                floor: min_disparity,
            });
        }
        let s = self.baseline / y.d;
        Ok([s * (y.u - self.cu), s * (self.fu / self.fv) * (y.v - self.cv), s * self.fu])
    }

    /// Differentiable projection of `[N, 3]` points to `[N, 3]` rows of
    /// `(u, v, d)`. Callers guarantee `z > 0`.
    pub fn project_tensor(&self, points: &Tensor) -> Tensor {
        let x = points.narrow(1, 0, 1);
        let y = points.narrow(1, 1, 1);
        let z = points.narrow(1, 2, 1);
        let u = x.div(&z).mul_scalar(self.fu).add_scalar(self.cu);
        let v = y.div(&z).mul_scalar(self.fv).add_scalar(self.cv);
        let d = Tensor::full(z.shape(), self.fu * self.baseline).div(&z);
        Tensor::concat(&[u, v, d], 1)
    }

    /// Differentiable backprojection of `[N, 2]` keypoints with `[N, 1]`
    /// disparities to `[N, 3]` camera-frame points. Callers guarantee the
    /// disparities are above the floor.
    pub fn backproject_tensor(&self, keypoints: &Tensor, disparity: &Tensor) -> Tensor {
        let scale = Tensor::full(disparity.shape(), self.baseline).div(disparity);
        let u = keypoints.narrow(1, 0, 1);
        let v = keypoints.narrow(1, 1, 1);
        let x = u.add_scalar(-self.cu).mul(&scale);
        let y = v.add_scalar(-self.cv).mul_scalar(self.fu / self.fv).mul(&scale);
        let z = scale.mul_scalar(self.fu);
        Tensor::concat(&[x, y, z], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> StereoCamera {
        StereoCamera {
            fu: 100.0,
            fv: 100.0,
            cu: 48.0,
            cv: 32.0,
            baseline: 0.2,
            width: 96,
            height: 64,
        }
    }

    #[test]
    fn projects_reference_points() {
        let c = cam();
        assert_eq!(c.project([0.0, 0.0, 2.0]).unwrap(), ImageObservation { u: 48.0, v: 32.0, d: 10.0 });
        assert_eq!(c.project([1.0, 0.0, 2.0]).unwrap(), ImageObservation { u: 98.0, v: 32.0, d: 10.0 });
        assert_eq!(c.project([0.0, 0.0, 4.0]).unwrap().d, 5.0);
        assert!(matches!(c.project([0.0, 0.0, 0.0]), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn backprojects_reference_observations() {
        let c = cam();
        let p = c.backproject(&ImageObservation { u: 48.0, v: 32.0, d: 10.0 }).unwrap();
        assert_eq!(p, [0.0, 0.0, 2.0]);
        let p = c.backproject(&ImageObservation { u: 98.0, v: 32.0, d: 10.0 }).unwrap();
        assert_eq!(p, [1.0, 0.0, 2.0]);
        let err = c.backproject(&ImageObservation { u: 1.0, v: 1.0, d: 0.1 });
        assert!(matches!(err, Err(Error::NearInfiniteDepth { .. })));
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut c = cam();
        assert!(c.validate().is_ok());
        c.cu = 96.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_maps_agree_with_scalar_maps() {
        let c = cam();
        let pts = Tensor::constant(vec![2, 3], vec![0.3, -0.2, 3.0, -1.0, 0.5, 7.5]);
        let obs = c.project_tensor(&pts).to_vec();
        for i in 0..2 {
            let p = [pts.to_vec()[3 * i], pts.to_vec()[3 * i + 1], pts.to_vec()[3 * i + 2]];
            let o = c.project(p).unwrap();
            assert!((obs[3 * i] - o.u).abs() < 1e-12);
            assert!((obs[3 * i + 1] - o.v).abs() < 1e-12);
            assert!((obs[3 * i + 2] - o.d).abs() < 1e-12);
        }
        let kp = Tensor::constant(vec![2, 2], vec![obs[0], obs[1], obs[3], obs[4]]);
        let d = Tensor::constant(vec![2, 1], vec![obs[2], obs[5]]);
        let back = c.backproject_tensor(&kp, &d).to_vec();
        for (a, b) in back.iter().zip(pts.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
