use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::camera::FisheyeCamera;
use crate::error::{Error, Result};

/// The four head-mounted cameras, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    FrontLeft,
    FrontRight,
    RearLeft,
    RearRight,
}

impl View {
    pub const ALL: [View; 4] = [View::FrontLeft, View::FrontRight, View::RearLeft, View::RearRight];

    pub fn name(self) -> &'static str {
        match self {
            View::FrontLeft => "front_left",
            View::FrontRight => "front_right",
            View::RearLeft => "rear_left",
            View::RearRight => "rear_right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_front(self) -> bool {
        matches!(self, View::FrontLeft | View::FrontRight)
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown view `{s}`")))
    }
}

/// Placement and intrinsics from which the default rig is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigParams {
    /// Left–right distance between the two cameras on one side, metres.
    pub same_side_baseline: f64,
    /// Distance between the front and rear camera pairs, metres.
    pub front_rear_distance: f64,
    /// Camera height relative to the head centre, metres.
    pub camera_height: f64,
    /// Tilt of each optical axis away from straight down, towards the body.
    pub pitch_deg: f64,
    /// Field-of-view half-angle.
    pub fov_half_angle_deg: f64,
    /// `(width, height)` in pixels.
    pub image_size: [usize; 2],
    /// Focal length as a fraction of image width, pixels per radian.
    pub focal_per_width: f64,
}

impl Default for RigParams {
    fn default() -> Self {
        Self {
            same_side_baseline: 0.12,
            front_rear_distance: 0.37,
            camera_height: -0.02,
            pitch_deg: 20.0,
            fov_half_angle_deg: 92.5,
            image_size: [64, 64],
            focal_per_width: 0.45,
        }
    }
}

/// Four-view fisheye rig; the rig frame is head-fixed with `+x` to the
/// wearer's right, `+y` up and `+z` forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub cameras: BTreeMap<View, FisheyeCamera>,
    pub same_side_baseline: f64,
    pub front_rear_distance: f64,
}

impl RigConfig {
    pub fn from_params(p: &RigParams) -> Result<Self> {
        if !(p.same_side_baseline > 0.0 && p.front_rear_distance > 0.0) {
            return Err(Error::Config("rig distances must be positive".into()));
        }
        let (w, h) = (p.image_size[0] as f64, p.image_size[1] as f64);
        let pitch = p.pitch_deg.to_radians();
        let mut cameras = BTreeMap::new();
        for view in View::ALL {
            let x = if matches!(view, View::FrontLeft | View::RearLeft) { -0.5 } else { 0.5 } * p.same_side_baseline;
            let (z, toward) = if view.is_front() {
                (0.5 * p.front_rear_distance, -1.0)
            } else {
                (-0.5 * p.front_rear_distance, 1.0)
            };
            let axis = Vector3::new(0.0, -pitch.cos(), toward * pitch.sin());
            let right = Vector3::new(if view.is_front() { 1.0 } else { -1.0 }, 0.0, 0.0);
            let pose = camera_pose(Point3::new(x, p.camera_height, z), axis, right);
            let cam = FisheyeCamera::new(
                p.focal_per_width * w,
                Vector2::new(w / 2.0, h / 2.0),
                p.image_size,
                p.fov_half_angle_deg.to_radians(),
                pose,
            )?;
            cameras.insert(view, cam);
        }
        let rig = Self { cameras, same_side_baseline: p.same_side_baseline, front_rear_distance: p.front_rear_distance };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != 4 || View::ALL.iter().any(|v| !self.cameras.contains_key(v)) {
            return Err(Error::Config("rig must contain exactly the four canonical views".into()));
        }
        self.cameras.values().try_for_each(FisheyeCamera::validate)
    }

    pub fn camera(&self, view: View) -> &FisheyeCamera {
        &self.cameras[&view]
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("rig serialises");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rig→camera transform for a camera at `center` looking along `axis` with
/// image `+x` as close to `right` as orthogonality allows.
fn camera_pose(center: Point3<f64>, axis: Vector3<f64>, right: Vector3<f64>) -> Isometry3<f64> {
    let z = axis.normalize();
    let x = (right - z * right.dot(&z)).normalize();
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]));
    let t = -(rot * center.coords);
    Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_rotation_matrix(&rot))
}
