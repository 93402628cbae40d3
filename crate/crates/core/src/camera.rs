use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{invalid, Result};

/// Pinhole camera for one frame. Pixel `(u, v)` samples the image plane at
/// exactly `(u, v)`, so the principal point is expressed in the same units.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    /// Upper-triangular intrinsics.
    pub intrinsics: Matrix3<f64>,
    /// Rigid world-to-camera transform.
    pub world_to_camera: Matrix4<f64>,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraFrame {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        time: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { intrinsics, world_to_camera, time, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with intrinsics `fx, fy, cx, cy` and identity pose.
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, time: f64) -> Result<Self> {
        Self::new(
            Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            Matrix4::identity(),
            time,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.iter().all(|v| v.is_finite()) && self.world_to_camera.iter().all(|v| v.is_finite())) {
            return Err(invalid("camera matrices must be finite"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(invalid("intrinsics must be upper triangular with K[2][2] = 1"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() < 0.0 {
            return Err(invalid("extrinsic rotation block is not orthonormal"));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(invalid("extrinsic bottom row must be [0, 0, 0, 1]"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_cam(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(
            (k[(0, 0)] * p.x + k[(0, 1)] * p.y) / p.z + k[(0, 2)],
            k[(1, 1)] * p.y / p.z + k[(1, 2)],
        )
    }

    /// Camera-frame point at depth `z` seen through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector3::new(x * z, y * z, z)
    }

    pub fn with_time(&self, time: f64) -> Self {
        Self { time, ..self.clone() }
    }
}
