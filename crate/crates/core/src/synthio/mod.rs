//! Procedural synthetic dataset: motion sampling, capsule rendering, the
//! on-disk tensor format, and the split-aware loader.

pub mod format;
mod dataset;
mod motion;
mod render;

pub use dataset::{
    generate_dataset, iterate_split, load_record, mix_seed, save_record, Batch, Dataset, DatasetConfig, Manifest,
    Split, SplitEntry, DATASET_VERSION,
};
pub use motion::{joint_limits, sample_motion, Action, IdentityParams, MotionClip, MotionConfig};
pub use render::{albedo, render_frame, render_image, render_pose, DatasetRecord, RenderParams, ViewRecord};
