use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{read_archive, write_archive, DType, Stored};
use super::motion::{sample_motion, Action, IdentityParams, MotionConfig};
use super::render::{render_frame, DatasetRecord, RenderParams, ViewRecord};
use crate::error::{Error, Result};
use crate::geometry::{hex_digest, Pose3D, RigConfig, RigParams, View, NUM_HEATMAP_JOINTS};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Everything that determines a generated dataset apart from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of identities assigned to train, val and test, in that order.
    pub identities_per_split: [usize; 3],
    pub actions: Vec<Action>,
    pub clips_per_action: usize,
    pub frames_per_clip: usize,
    pub rig: RigParams,
    pub render: RenderParams,
    pub motion: MotionConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities_per_split: [3, 1, 1],
            actions: Action::ALL.to_vec(),
            clips_per_action: 1,
            frames_per_clip: 64,
            rig: RigParams::default(),
            render: RenderParams::default(),
            motion: MotionConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.rig.image_size;
        let [hw, hh] = self.render.heatmap_size;
        if w != 4 * hw || h != 4 * hh {
            return Err(Error::Config(format!("heatmap size {hw}×{hh} must be a quarter of image size {w}×{h}")));
        }
        if w % 32 != 0 || h % 32 != 0 {
            return Err(Error::Config(format!("image size {w}×{h} must be a multiple of 32")));
        }
        if self.actions.is_empty() || self.clips_per_action == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config("dataset would contain no frames".into()));
        }
        if self.identities_per_split.iter().any(|&n| n == 0) {
            return Err(Error::Config("every split needs at least one identity".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub identities: Vec<u32>,
    /// Paths relative to the dataset root.
    pub records: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub rig_hash: String,
    pub rig: RigConfig,
    pub config: DatasetConfig,
    pub splits: BTreeMap<Split, SplitEntry>,
    pub format: String,
}

impl Manifest {
    pub fn records(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], |s| &s.records)
    }
}

/// Deterministic 64-bit mixing of seed components.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    identity_id: u32,
    action: Action,
    frame_index: u32,
    rig_hash: String,
}

fn record_entries(rec: &DatasetRecord, rig_hash: &str) -> Vec<(String, Stored)> {
    let meta = RecordMeta {
        identity_id: rec.identity_id,
        action: rec.action,
        frame_index: rec.frame_index,
        rig_hash: rig_hash.to_string(),
    };
    let json = serde_json::to_vec(&meta).expect("meta serialises");
    let meta_t = Tensor::new(&[json.len()], json.iter().map(|&b| b as f64).collect()).expect("1-d");
    let mut entries = vec![
        ("meta".to_string(), Stored::new(DType::U8, meta_t)),
        ("pose".to_string(), Stored::new(DType::F64, rec.gt_pose.to_tensor())),
    ];
    for (view, v) in &rec.views {
        let vis = Tensor::new(&[NUM_HEATMAP_JOINTS], v.visibility.iter().map(|&b| b as u8 as f64).collect()).expect("1-d");
        entries.push((format!("{view}/image"), Stored::new(DType::F32, v.image.clone())));
        entries.push((format!("{view}/heatmaps"), Stored::new(DType::F32, v.heatmaps.clone())));
        entries.push((format!("{view}/visibility"), Stored::new(DType::U8, vis)));
    }
    entries
}

pub fn save_record(path: &Path, rec: &DatasetRecord, rig_hash: &str) -> Result<()> {
    write_archive(path, &record_entries(rec, rig_hash))
}

/// Reads a record, touching only the tensors of `views`. The names of the
/// entries read are appended to `audit`.
pub fn load_record(
    path: &Path,
    views: &[View],
    expected_rig_hash: Option<&str>,
    audit: Option<&Mutex<BTreeSet<String>>>,
) -> Result<DatasetRecord> {
    let wanted = |name: &str| match name.split_once('/') {
        Some((v, _)) => views.iter().any(|view| view.name() == v),
        None => true,
    };
    let mut entries = read_archive(path, wanted)?;
    if let Some(a) = audit {
        a.lock().expect("audit lock").extend(entries.keys().cloned());
    }
    let corrupt = |reason: String| Error::corrupt(path, reason);
    let mut take = |name: &str| entries.remove(name).ok_or_else(|| corrupt(format!("missing entry `{name}`")));
    let meta_bytes: Vec<u8> = take("meta")?.tensor.data().iter().map(|&v| v as u8).collect();
    let meta: RecordMeta = serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(format!("meta: {e}")))?;
    if let Some(expected) = expected_rig_hash {
        if meta.rig_hash != expected {
            return Err(Error::HashMismatch {
                what: format!("rig of {}", path.display()),
                expected: expected.to_string(),
                found: meta.rig_hash,
            });
        }
    }
    let gt_pose = Pose3D::from_slice(take("pose")?.tensor.data()).map_err(|e| corrupt(e.to_string()))?;
    let mut out_views = BTreeMap::new();
    for &view in views {
        let image = take(&format!("{view}/image"))?.tensor;
        let heatmaps = take(&format!("{view}/heatmaps"))?.tensor;
        let vis_t = take(&format!("{view}/visibility"))?.tensor;
        if vis_t.len() != NUM_HEATMAP_JOINTS || heatmaps.rank() != 3 || image.rank() != 3 {
            return Err(corrupt(format!("bad tensor shapes for view {view}")));
        }
        let mut visibility = [false; NUM_HEATMAP_JOINTS];
        for (v, &b) in visibility.iter_mut().zip(vis_t.data()) {
            *v = b != 0.0;
        }
        out_views.insert(view, ViewRecord { image, heatmaps, visibility });
    }
    Ok(DatasetRecord {
        views: out_views,
        gt_pose,
        action: meta.action,
        identity_id: meta.identity_id,
        frame_index: meta.frame_index,
    })
}

/// Generates the full dataset under `root` and writes `manifest.json`.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, root: &Path) -> Result<Manifest> {
    config.validate()?;
    let rig = RigConfig::from_params(&config.rig)?;
    let rig_hash = rig.hash();
    let mut splits = BTreeMap::new();
    let mut next_id: u32 = 0;
    for (split, &count) in Split::ALL.iter().zip(&config.identities_per_split) {
        let dir = root.join("records").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entry = SplitEntry { identities: Vec::new(), records: Vec::new() };
        for _ in 0..count {
            let id = next_id;
            next_id += 1;
            entry.identities.push(id);
            let identity = IdentityParams::sample(id, seed);
            let skeleton = identity.skeleton();
            let body = identity.body();
            let mut frame_index: u32 = 0;
            for (ai, &action) in config.actions.iter().enumerate() {
                for clip in 0..config.clips_per_action {
                    let clip_seed = mix_seed(&[seed, id as u64, ai as u64, clip as u64]);
                    let motion = sample_motion(clip_seed, &identity, config.frames_per_clip, action, &config.motion)?;
                    for angles in &motion.frames {
                        let noise_seed = mix_seed(&[seed, id as u64, frame_index as u64, 0x6e6f_6973_65]);
                        let views = render_frame(&rig, &skeleton, &body, angles, &config.render, noise_seed)?;
                        let rec = DatasetRecord {
                            views,
                            gt_pose: skeleton.forward_kinematics(angles),
                            action,
                            identity_id: id,
                            frame_index,
                        };
                        let rel = format!("records/{}/{id:03}_{frame_index:05}.egt", split.name());
                        save_record(&root.join(&rel), &rec, &rig_hash)?;
                        entry.records.push(rel);
                        frame_index += 1;
                    }
                }
            }
        }
        splits.insert(*split, entry);
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed,
        config_hash: config.hash(),
        rig_hash,
        rig,
        config: config.clone(),
        splits,
        format: "EGT1 archive: per record `meta` (u8 JSON), `pose` (f64 16x3), and per view `<view>/image` \
                 (f32 3xHxW), `<view>/heatmaps` (f32 15xhxw), `<view>/visibility` (u8 15)"
            .to_string(),
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Deterministic batching of `len` items: shuffled by `shuffle_seed` when
/// given, the final short batch kept.
pub fn iterate_split(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(s) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked tensors of a batch of records for a subset of views.
#[derive(Clone, Debug)]
pub struct Batch {
    pub views: Vec<View>,
    /// Per view, `[B, 3, H, W]`.
    pub images: Vec<Tensor>,
    /// Per view, `[B, 15, h, w]`.
    pub heatmaps: Vec<Tensor>,
    /// Per view, per sample.
    pub visibility: Vec<Vec<[bool; NUM_HEATMAP_JOINTS]>>,
    /// `[B, 16, 3]`.
    pub poses: Tensor,
    pub actions: Vec<Action>,
    pub identities: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_records(records: &[DatasetRecord], views: &[View]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut images = Vec::new();
        let mut heatmaps = Vec::new();
        let mut visibility = Vec::new();
        for view in views {
            let vs: Vec<&ViewRecord> = records
                .iter()
                .map(|r| r.views.get(view).ok_or_else(|| Error::Config(format!("record lacks view {view}"))))
                .collect::<Result<_>>()?;
            images.push(Tensor::stack(&vs.iter().map(|v| &v.image).collect::<Vec<_>>())?);
            heatmaps.push(Tensor::stack(&vs.iter().map(|v| &v.heatmaps).collect::<Vec<_>>())?);
            visibility.push(vs.iter().map(|v| v.visibility).collect());
        }
        let poses: Vec<Tensor> = records.iter().map(|r| r.gt_pose.to_tensor()).collect();
        Ok(Self {
            views: views.to_vec(),
            images,
            heatmaps,
            visibility,
            poses: Tensor::stack(&poses.iter().collect::<Vec<_>>())?,
            actions: records.iter().map(|r| r.action).collect(),
            identities: records.iter().map(|r| r.identity_id).collect(),
        })
    }
}

/// An opened, hash-checked dataset directory with an access log.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    audit: Mutex<BTreeSet<String>>,
}

impl Dataset {
    /// Opens `root/manifest.json`; refuses a manifest whose stored rig does
    /// not match its recorded hash, or whose rig differs from `expected_rig`.
    pub fn open(root: &Path, expected_rig_hash: Option<&str>) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let actual = manifest.rig.hash();
        if actual != manifest.rig_hash {
            return Err(Error::HashMismatch { what: "manifest rig".into(), expected: manifest.rig_hash, found: actual });
        }
        if let Some(expected) = expected_rig_hash {
            if expected != manifest.rig_hash {
                return Err(Error::HashMismatch {
                    what: "dataset rig".into(),
                    expected: expected.to_string(),
                    found: manifest.rig_hash,
                });
            }
        }
        Ok(Self { root: root.to_path_buf(), manifest, audit: Mutex::new(BTreeSet::new()) })
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.records(split).len()
    }

    pub fn load(&self, split: Split, index: usize, views: &[View]) -> Result<DatasetRecord> {
        let rel = self
            .manifest
            .records(split)
            .get(index)
            .ok_or_else(|| Error::Config(format!("{} has no record {index}", split.name())))?;
        load_record(&self.root.join(rel), views, Some(&self.manifest.rig_hash), Some(&self.audit))
    }

    pub fn load_batch(&self, split: Split, indices: &[usize], views: &[View]) -> Result<Batch> {
        let recs: Vec<DatasetRecord> = indices.iter().map(|&i| self.load(split, i, views)).collect::<Result<_>>()?;
        Batch::from_records(&recs, views)
    }

    /// Names of every tensor entry read so far (e.g. `rear_left/image`).
    pub fn accessed(&self) -> BTreeSet<String> {
        self.audit.lock().expect("audit lock").clone()
    }

    pub fn clear_audit(&self) {
        self.audit.lock().expect("audit lock").clear();
    }
}
