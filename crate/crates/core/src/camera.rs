//! Pinhole cameras and the rays they shoot.
//!
//! Cameras follow a right-handed convention: in the local frame the camera
//! looks down `-z`, `+x` points right and `+y` points up. Image rows grow
//! downwards, so the pixel `v` axis maps to `-y`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("cx outside (0, width)"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("cy outside (0, height)"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }
}

pub(crate) fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::invalid(format!(
            "rotation is not orthonormal (error {err:e})"
        )));
    }
    if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::invalid("rotation determinant is not +1"));
    }
    Ok(())
}

/// A ray segment `origin + t * direction` for `t` in `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        if !(near >= 0.0 && near < far) {
            return Err(Error::invalid(format!("bad ray interval [{near}, {far}]")));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, near: f64, far: f64) -> Result<Self> {
        intrinsics.validate()?;
        check_rotation(&pose.rotation)?;
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(Error::invalid(format!("bad depth range [{near}, {far}]")));
        }
        Ok(Self {
            intrinsics,
            pose,
            near,
            far,
        })
    }

    /// Camera at `eye` whose optical axis passes through `target`.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Degenerate("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Degenerate("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let cam_up = right.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, cam_up, -forward]);
        Camera::new(intrinsics, Pose::new(rotation, eye)?, near, far)
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    /// World-space optical axis.
    pub fn axis(&self) -> Vec3 {
        -self.pose.rotation.column(2).into_owned()
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Result<Ray> {
        if px >= self.width() || py >= self.height() {
            return Err(Error::invalid(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width(),
                self.height()
            )));
        }
        Ok(self.ray_through(px as f64 + 0.5, py as f64 + 0.5))
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let local = Vec3::new((u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0);
        let direction = (self.pose.rotation * local).normalize();
        Ray {
            origin: self.center(),
            direction,
            near: self.near,
            far: self.far,
        }
    }

    /// Continuous image coordinates of a world point, or `None` behind the camera.
    pub fn project(&self, point: &Vec3) -> Option<(f64, f64)> {
        let local = self.pose.rotation.transpose() * (point - self.pose.translation);
        if local.z >= 0.0 {
            return None;
        }
        let depth = -local.z;
        let k = &self.intrinsics;
        Some((
            k.cx + k.fx * local.x / depth,
            k.cy - k.fy * local.y / depth,
        ))
    }
}

/// Flat, human-readable camera record used in pose manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-from-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let r = &c.pose.rotation;
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        let t = c.pose.translation;
        Self {
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            rotation,
            translation: [t.x, t.y, t.z],
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let intrinsics = Intrinsics {
            width: r.width,
            height: r.height,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
        };
        let rotation = Matrix3::from_row_slice(&r.rotation);
        let pose = Pose::new(rotation, Vec3::from(r.translation))?;
        Camera::new(intrinsics, pose, r.near, r.far)
    }
}
