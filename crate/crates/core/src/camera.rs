//! Pinhole camera model and ray generation.
//!
//! Camera frame: x right, y down, z forward (optical axis). Pixel centers sit
//! at integer coordinates `(col, row)`.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera transform.
    pub pose: Pose,
}

/// A ray `r(t) = origin + t * direction` with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Point3<f64>, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: Pose,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera of the given size with its principal point at the
    /// image center.
    pub fn centered(focal: f64, width: usize, height: usize, pose: Pose) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            pose,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image must be nonempty"));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.pose.translation.vector)
    }

    /// Rotation part of the pose as a matrix (columns are the camera axes in world).
    pub fn rotation(&self) -> Matrix3<f64> {
        *self.pose.rotation.to_rotation_matrix().matrix()
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.pose.rotation * Vec3::z()
    }

    /// Unnormalized camera-frame direction through pixel `(u, v)` with unit z.
    pub fn pixel_ray_camera(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    pub fn generate_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !self.contains_pixel(u, v) {
            return Err(Error::invalid(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(u, v))
    }

    pub(crate) fn ray_unchecked(&self, u: f64, v: f64) -> Ray {
        let d_cam = self.pixel_ray_camera(u, v).normalize();
        Ray {
            origin: self.position(),
            direction: self.pose.rotation * d_cam,
        }
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        self.pose.inverse_transform_point(p)
    }

    /// Projects a world point; returns `(u, v, z)` for points in front of the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let q = self.to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * q.x / q.z + self.cx,
            self.fy * q.y / q.z + self.cy,
            q.z,
        ))
    }

    /// Lifts pixel `(u, v)` with z-depth `z` into the world frame.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        let q = self.pixel_ray_camera(u, v) * z;
        self.pose.transform_point(&Point3::from(q))
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image (camera −y).
    pub fn look_at(
        focal: f64,
        width: usize,
        height: usize,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vec3,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        let pose = Pose::from_parts(
            Translation3::from(eye.coords),
            UnitQuaternion::from_rotation_matrix(&rot),
        );
        Self::centered(focal, width, height, pose)
    }
}

/// Builds a pose from a 4×4 world-from-camera matrix, rejecting rotations that
/// are not orthonormal within 1e-8.
pub fn pose_from_matrix(m: &Matrix4<f64>) -> Result<Pose> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-8 || (r.determinant() - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!(
            "pose rotation is not orthonormal (error {err:e})"
        )));
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
        return Err(Error::invalid("pose bottom row must be 0 0 0 1"));
    }
    let t = Translation3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rot = Rotation3::from_matrix_unchecked(r);
    Ok(Pose::from_parts(t, UnitQuaternion::from_rotation_matrix(&rot)))
}
