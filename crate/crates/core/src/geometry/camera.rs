use nalgebra::{Isometry3, Point3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equidistant fisheye camera (`r = f·θ`).
///
/// Camera frame: `+z` is the optical axis, `+x` points right in the image and
/// `+y` points down. Pixel coordinates have `(0, 0)` at the centre of the
/// top-left pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    /// Pixels per radian of off-axis angle.
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    /// `(width, height)` in pixels.
    pub image_size: [usize; 2],
    /// Half-angle of the field of view, radians.
    pub fov_limit: f64,
    /// Rigid transform taking rig-frame points into the camera frame.
    pub pose: Isometry3<f64>,
}

/// Result of projecting a point; `pixel` is meaningless when `!valid`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub valid: bool,
}

/// A half-line in the rig frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Unit<Vector3<f64>>,
}

impl Ray {
    /// Perpendicular distance from `p` to the ray's supporting line.
    pub fn distance_to(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.origin;
        (d - self.direction.into_inner() * d.dot(&self.direction)).norm()
    }
}

impl FisheyeCamera {
    pub fn new(
        focal: f64,
        principal_point: Vector2<f64>,
        image_size: [usize; 2],
        fov_limit: f64,
        pose: Isometry3<f64>,
    ) -> Result<Self> {
        let cam = Self { focal, principal_point, image_size, fov_limit, pose };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Config(format!("focal must be positive, got {}", self.focal)));
        }
        if !(self.fov_limit > 0.0 && self.fov_limit <= std::f64::consts::PI) {
            return Err(Error::Config(format!("fov_limit {} outside (0, pi]", self.fov_limit)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }

    /// Camera centre in the rig frame.
    pub fn center(&self) -> Point3<f64> {
        self.pose.inverse_transform_point(&Point3::origin())
    }

    /// Optical axis direction in the rig frame.
    pub fn axis(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(self.pose.inverse_transform_vector(&Vector3::z()))
    }

    /// Projects a rig-frame point.
    pub fn project(&self, point: &Point3<f64>) -> Projection {
        self.project_camera_frame(&self.pose.transform_point(point))
    }

    pub fn project_camera_frame(&self, p: &Point3<f64>) -> Projection {
        let rho = p.x.hypot(p.y);
        if !(rho.is_finite() && p.z.is_finite()) || (rho == 0.0 && p.z <= 0.0) {
            return Projection { pixel: self.principal_point, valid: false };
        }
        let theta = rho.atan2(p.z);
        if theta >= self.fov_limit {
            return Projection { pixel: self.principal_point, valid: false };
        }
        let pixel = if rho == 0.0 {
            self.principal_point
        } else {
            self.principal_point + Vector2::new(p.x, p.y) * (self.focal * theta / rho)
        };
        Projection { pixel, valid: true }
    }

    /// Ray through `pixel`, in the rig frame.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Ray> {
        let d = pixel - self.principal_point;
        let r = d.norm();
        let theta = r / self.focal;
        if theta >= self.fov_limit {
            return Err(Error::OutsideFov { u: pixel.x, v: pixel.y, theta });
        }
        let dir_cam = if r == 0.0 {
            Vector3::z()
        } else {
            let s = theta.sin() / r;
            Vector3::new(d.x * s, d.y * s, theta.cos())
        };
        Ok(Ray {
            origin: self.center(),
            direction: Unit::new_normalize(self.pose.inverse_transform_vector(&dir_cam)),
        })
    }

    /// Scale factors `(sx, sy)` from image pixels to a `grid`-sized map.
    pub fn grid_scale(&self, grid: [usize; 2]) -> (f64, f64) {
        (
            grid[0] as f64 / self.image_size[0] as f64,
            grid[1] as f64 / self.image_size[1] as f64,
        )
    }
}
