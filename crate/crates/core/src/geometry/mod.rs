//! Fisheye cameras, the four-view head-mounted rig, the articulated
//! skeleton, its capsule body and occlusion-aware joint visibility.

mod body;
mod camera;
mod heatmap;
mod rig;
mod skeleton;

pub use body::{joint_visibility, Capsule, CapsuleBody, VISIBILITY_EPS};
pub use camera::{FisheyeCamera, Projection, Ray};
pub use heatmap::{heatmap_center, render_gt_heatmaps};
pub(crate) use rig::hex_digest;
pub use rig::{RigConfig, RigParams, View};
pub use skeleton::{joint_index, JointAngles, Pose3D, Skeleton, JOINT_NAMES, NUM_HEATMAP_JOINTS, NUM_JOINTS};
