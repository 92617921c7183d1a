use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::camera::Ray;
use super::rig::{RigConfig, View};
use super::skeleton::{Pose3D, NUM_JOINTS};
use crate::error::{Error, Result};

/// Occluders closer to the camera than the joint by less than this are
/// ignored (metres).
pub const VISIBILITY_EPS: f64 = 1e-3;

/// A capsule between two joints; `a == b` gives a sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: usize,
    pub b: usize,
    pub radius: f64,
}

/// Union of capsules attached to the skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleBody {
    pub capsules: Vec<Capsule>,
}

impl Default for CapsuleBody {
    fn default() -> Self {
        let c = |a, b, radius| Capsule { a, b, radius };
        Self {
            capsules: vec![
                c(1, 8, 0.12),
                c(1, 9, 0.12),
                c(2, 3, 0.06),
                c(8, 9, 0.09),
                c(2, 4, 0.045),
                c(3, 5, 0.045),
                c(4, 6, 0.04),
                c(5, 7, 0.04),
                c(6, 6, 0.045),
                c(7, 7, 0.045),
                c(8, 10, 0.07),
                c(9, 11, 0.07),
                c(10, 12, 0.055),
                c(11, 13, 0.055),
                c(12, 14, 0.04),
                c(13, 15, 0.04),
            ],
        }
    }
}

impl CapsuleBody {
    pub fn empty() -> Self {
        Self { capsules: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.capsules {
            if !(c.radius > 0.0) || c.a >= NUM_JOINTS || c.b >= NUM_JOINTS {
                return Err(Error::Config(format!("invalid capsule {c:?}")));
            }
        }
        Ok(())
    }
}

impl Capsule {
    pub fn endpoints(&self, pose: &Pose3D) -> (Point3<f64>, Point3<f64>) {
        (pose.point(self.a), pose.point(self.b))
    }

    /// Distance from `p` to the capsule's axis segment.
    pub fn axis_distance(&self, pose: &Pose3D, p: &Point3<f64>) -> f64 {
        let (a, b) = self.endpoints(pose);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (a + ab * t)).norm()
    }

    pub fn contains(&self, pose: &Pose3D, p: &Point3<f64>) -> bool {
        self.axis_distance(pose, p) <= self.radius
    }

    /// Parameter interval `[t0, t1]` along the (unit-direction) ray where it
    /// lies inside the capsule, if any.
    pub fn intersect(&self, pose: &Pose3D, ray: &Ray) -> Option<(f64, f64)> {
        let (a, b) = self.endpoints(pose);
        let d = ray.direction.into_inner();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut merge = |iv: Option<(f64, f64)>| {
            if let Some((t0, t1)) = iv {
                lo = lo.min(t0);
                hi = hi.max(t1);
            }
        };
        merge(sphere_interval(&ray.origin, &d, &a, self.radius));
        merge(sphere_interval(&ray.origin, &d, &b, self.radius));
        merge(cylinder_interval(&ray.origin, &d, &a, &b, self.radius));
        (lo <= hi).then_some((lo, hi))
    }
}

fn sphere_interval(o: &Point3<f64>, d: &Vector3<f64>, c: &Point3<f64>, r: f64) -> Option<(f64, f64)> {
    let oc = o - c;
    let half_b = oc.dot(d);
    let disc = half_b * half_b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-half_b - s, -half_b + s))
}

/// Finite cylinder between `a` and `b` (no caps; the spheres cover them).
fn cylinder_interval(o: &Point3<f64>, d: &Vector3<f64>, a: &Point3<f64>, b: &Point3<f64>, r: f64) -> Option<(f64, f64)> {
    let ab = b - a;
    let len = ab.norm();
    if len == 0.0 {
        return None;
    }
    let u = ab / len;
    let ao = o - a;
    let dp = d - u * d.dot(&u);
    let op = ao - u * ao.dot(&u);
    let qa = dp.norm_squared();
    let qb = 2.0 * dp.dot(&op);
    let qc = op.norm_squared() - r * r;
    let (mut t0, mut t1) = if qa < 1e-15 {
        // parallel to the axis: inside for all t or none
        if qc > 0.0 {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        ((-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa))
    };
    // clip to the slab 0 <= (p - a)·u <= len
    let (s0, sd) = (ao.dot(&u), d.dot(&u));
    if sd.abs() < 1e-15 {
        if s0 < 0.0 || s0 > len {
            return None;
        }
    } else {
        let (ta, tb) = ((0.0 - s0) / sd, (len - s0) / sd);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Whether `joint` is seen by `view`: it projects inside the field of view
/// and no capsule that does not contain it blocks the segment from the
/// camera centre.
pub fn joint_visibility(rig: &RigConfig, pose: &Pose3D, body: &CapsuleBody, view: View, joint: usize) -> bool {
    let cam = rig.camera(view);
    let p = pose.point(joint);
    if !cam.project(&p).valid {
        return false;
    }
    let origin = cam.center();
    let to_joint = p - origin;
    let dist = to_joint.norm();
    if dist == 0.0 {
        return false;
    }
    let ray = Ray { origin, direction: nalgebra::Unit::new_normalize(to_joint) };
    !body.capsules.iter().any(|c| {
        if c.contains(pose, &p) {
            return false;
        }
        matches!(c.intersect(pose, &ray), Some((t0, t1)) if t1 > 0.0 && t0 < dist - VISIBILITY_EPS)
    })
}
