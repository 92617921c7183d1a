use nalgebra::{Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 16;
/// Joints that get heatmaps: everything except the head.
pub const NUM_HEATMAP_JOINTS: usize = 15;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "neck",
    "left_arm",
    "right_arm",
    "left_forearm",
    "right_forearm",
    "left_hand",
    "right_hand",
    "left_upper_leg",
    "right_upper_leg",
    "left_leg",
    "right_leg",
    "left_foot",
    "right_foot",
    "left_toe",
    "right_toe",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(1),
    Some(1),
    Some(8),
    Some(9),
    Some(10),
    Some(11),
    Some(12),
    Some(13),
];

/// Rest-pose offsets from each joint's parent, metres, in the rig frame
/// (`+x` wearer's right, `+y` up, `+z` forward).
const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, -0.22, 0.0],
    [-0.18, -0.05, 0.0],
    [0.18, -0.05, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.26, 0.0],
    [0.0, -0.26, 0.0],
    [-0.10, -0.55, 0.0],
    [0.10, -0.55, 0.0],
    [0.0, -0.43, 0.0],
    [0.0, -0.43, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.05, 0.13],
    [0.0, -0.05, 0.13],
];

pub fn joint_index(name: &str) -> Result<usize> {
    JOINT_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| Error::UnknownJoint(name.to_string()))
}

/// Per-joint rotation vectors (axis × angle, radians).
pub type JointAngles = [[f64; 3]; NUM_JOINTS];

/// 16-joint kinematic tree rooted at the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// `None` for the root.
    pub parent_index: Vec<Option<usize>>,
    /// Distance from each joint to its parent; 0 for the root.
    pub bone_lengths: Vec<f64>,
    /// Unit rest direction of each bone in its parent's frame.
    pub rest_directions: Vec<[f64; 3]>,
    pub heatmap_joint_indices: Vec<usize>,
}

impl Default for Skeleton {
    fn default() -> Self {
        let mut lengths = Vec::with_capacity(NUM_JOINTS);
        let mut dirs = Vec::with_capacity(NUM_JOINTS);
        for o in REST_OFFSETS {
            let v = Vector3::from(o);
            let n = v.norm();
            lengths.push(n);
            dirs.push(if n > 0.0 { (v / n).into() } else { [0.0, 0.0, 0.0] });
        }
        Self {
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parent_index: PARENTS.to_vec(),
            bone_lengths: lengths,
            rest_directions: dirs,
            heatmap_joint_indices: (1..NUM_JOINTS).collect(),
        }
    }
}

impl Skeleton {
    /// Default skeleton with bone lengths scaled per body region, for
    /// synthesising distinct identities.
    pub fn scaled(torso: f64, arms: f64, legs: f64) -> Self {
        let mut s = Self::default();
        for (j, len) in s.bone_lengths.iter_mut().enumerate() {
            *len *= match j {
                1..=3 | 8 | 9 => torso,
                4..=7 => arms,
                _ => legs,
            };
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_names.len();
        if n != NUM_JOINTS
            || self.parent_index.len() != n
            || self.bone_lengths.len() != n
            || self.rest_directions.len() != n
        {
            return Err(Error::Config(format!("skeleton must have {NUM_JOINTS} joints")));
        }
        if self.parent_index[0].is_some() {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (j, p) in self.parent_index.iter().enumerate().skip(1) {
            // parents precede children, which also rules out cycles
            if !matches!(p, Some(p) if *p < j) {
                return Err(Error::Config(format!("joint {j} has invalid parent {p:?}")));
            }
        }
        if self.heatmap_joint_indices.len() != NUM_HEATMAP_JOINTS || self.heatmap_joint_indices.contains(&0) {
            return Err(Error::Config("heatmap joints must be the 15 non-head joints".into()));
        }
        if self.bone_lengths.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("bone lengths must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Joint positions for the given per-joint rotations. The root's rotation
    /// orients the whole body relative to the head-fixed rig.
    pub fn forward_kinematics(&self, angles: &JointAngles) -> Pose3D {
        let mut world_rot = [Rotation3::identity(); NUM_JOINTS];
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let local = Rotation3::new(Vector3::from(angles[j]));
            match self.parent_index[j] {
                None => world_rot[j] = local,
                Some(p) => {
                    let offset = Vector3::from(self.rest_directions[j]) * self.bone_lengths[j];
                    let pos = Vector3::from(joints[p]) + world_rot[p] * offset;
                    joints[j] = pos.into();
                    world_rot[j] = world_rot[p] * local;
                }
            }
        }
        Pose3D { joints }
    }
}

/// Device-relative joint positions in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

impl Pose3D {
    pub fn point(&self, j: usize) -> Point3<f64> {
        Point3::from(self.joints[j])
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[NUM_JOINTS, 3], |i| self.joints[i / 3][i % 3])
    }

    pub fn from_slice(data: &[f64]) -> Result<Self> {
        if data.len() != NUM_JOINTS * 3 {
            return Err(Error::Shape(format!("pose needs {} values, got {}", NUM_JOINTS * 3, data.len())));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, c) in data.chunks(3).enumerate() {
            joints[j] = [c[0], c[1], c[2]];
        }
        Ok(Self { joints })
    }
}
