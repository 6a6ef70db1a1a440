//! Quaternions, rigid transforms and the pinhole camera.
//!
//! Conventions: right-handed, the camera looks down +z with y pointing down
//! so that image rows grow with y. Rotations stored on a [`Camera`] map world
//! coordinates into the camera frame.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const DEFAULT_Z_NEAR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid(format!("quaternion {self:?} has zero or non-finite norm")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`; the rotation applies `rhs` first.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_rotation(&self) -> Result<Matrix3<f64>> {
        quat_to_rotation(self)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Orthonormal rotation matrix of `q`; `q` is normalized internally.
pub fn quat_to_rotation(q: &Quaternion) -> Result<Matrix3<f64>> {
    let Quaternion { w, x, y, z } = q.normalized()?;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Serializable camera description, also the on-disk JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation as (w, x, y, z).
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_z_near")]
    pub z_near: f64,
}

fn default_z_near() -> f64 {
    DEFAULT_Z_NEAR
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    rotation: Quaternion,
    rot: Matrix3<f64>,
    translation: Vec3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Quaternion,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !translation.iter().all(|v| v.is_finite()) || ![cx, cy].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        let rotation = rotation.normalized()?;
        let rot = quat_to_rotation(&rotation)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_near: DEFAULT_Z_NEAR,
            rotation,
            rot,
            translation,
        })
    }

    /// Camera at (0, 0, -distance) looking down +z at the origin, principal
    /// point at the image center.
    pub fn frontal(width: usize, height: usize, focal: f64, distance: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            Quaternion::IDENTITY,
            Vec3::new(0.0, 0.0, distance),
            width,
            height,
        )
    }

    pub fn from_spec(spec: &CameraSpec) -> Result<Self> {
        let mut cam = Self::new(
            spec.fx,
            spec.fy,
            spec.cx,
            spec.cy,
            Quaternion::from_array(spec.rotation),
            Vec3::from(spec.translation),
            spec.width,
            spec.height,
        )?;
        if !(spec.z_near > 0.0) {
            return Err(Error::invalid("z_near must be positive"));
        }
        cam.z_near = spec.z_near;
        Ok(cam)
    }

    pub fn to_spec(&self) -> CameraSpec {
        CameraSpec {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: self.rotation.to_array(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
            width: self.width,
            height: self.height,
            z_near: self.z_near,
        }
    }

    pub fn rotation(&self) -> Quaternion {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        &self.rot
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rot.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rot.transpose() * (p - self.translation)
    }

    /// Pixel coordinates and camera-space depth of a world point.
    pub fn project(&self, p: &Vec3) -> Result<(f64, f64, f64)> {
        let pc = self.world_to_camera(p);
        if !(pc.z > self.z_near) {
            return Err(Error::BehindCamera {
                z: pc.z,
                z_near: self.z_near,
            });
        }
        Ok((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }

    /// World point seen at pixel (u, v) with camera-space depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::invalid(format!("unproject needs positive depth, got {depth}")));
        }
        let pc = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        Ok(self.camera_to_world(&pc))
    }

    /// Unit direction of the ray through pixel (u, v), in world coordinates.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rot.transpose() * d).normalize()
    }
}

/// Rotation about the vertical (y) axis by `radians`.
pub fn yaw_quaternion(radians: f64) -> Quaternion {
    let (s, c) = (0.5 * radians).sin_cos();
    Quaternion::new(c, 0.0, s, 0.0)
}

/// Orbits `base` about the vertical axis through `pivot` by `yaw_deg` degrees.
///
/// The pivot keeps its camera-frame coordinates, so it projects to the same
/// pixel; composition is additive in the yaw angle.
pub fn yaw_camera(base: &Camera, yaw_deg: f64, pivot: &Vec3) -> Result<Camera> {
    if !yaw_deg.is_finite() || yaw_deg.abs() > 90.0 {
        return Err(Error::invalid(format!("yaw {yaw_deg} outside [-90, 90] degrees")));
    }
    if yaw_deg == 0.0 {
        return Ok(base.clone());
    }
    // The orbit moves the camera by Q(x) = Ry(yaw)(x - pivot) + pivot, so the
    // new world-to-camera map is the old one composed with Q^-1.
    let inv = yaw_quaternion(-yaw_deg.to_radians());
    let inv_m = quat_to_rotation(&inv)?;
    let rotation = base.rotation.mul(&inv);
    let translation = base.rot * (pivot - inv_m * pivot) + base.translation;
    let mut cam = Camera::new(
        base.fx,
        base.fy,
        base.cx,
        base.cy,
        rotation,
        translation,
        base.width,
        base.height,
    )?;
    cam.z_near = base.z_near;
    Ok(cam)
}
