use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::estimator2d::{estimate, heatmap_mse_loss, init_estimator, EstimatorOutput};
use crate::geometry::RigConfig;
use crate::lifter3d::{init_lifter, lift, pose_loss_with};
use crate::nn::{Init, ParamStore};
use crate::refiner::{init_refiner, refine_all, refinement_loss};
use crate::synthio::mix_seed;
use crate::tensor::Tensor;

use super::config::ExperimentConfig;

pub const ESTIMATOR: &str = "est";
pub const REFINER: &str = "ref";
pub const LIFTER: &str = "lift";

/// Fresh weights for every module the configuration uses.
pub fn init_model(cfg: &ExperimentConfig) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    init_estimator(&mut Init::new(mix_seed(&[cfg.seed, 1])), &mut ps, ESTIMATOR, &cfg.estimator)?;
    if !cfg.training.identity_refiner {
        init_refiner(&mut Init::new(mix_seed(&[cfg.seed, 2])), &mut ps, REFINER, &cfg.refiner)?;
    }
    init_lifter(&mut Init::new(mix_seed(&[cfg.seed, 3])), &mut ps, LIFTER, &cfg.lifter)?;
    Ok(ps)
}

/// Estimator outputs of one view for a set of frames, held as plain tensors.
#[derive(Clone, Debug)]
pub struct ViewOutputs {
    pub heatmaps: Tensor,
    pub features: Tensor,
    pub backbone: Tensor,
    pub anchors: Tensor,
    pub peaks: Tensor,
}

impl ViewOutputs {
    pub fn from_graph(g: &Graph, o: &EstimatorOutput) -> Self {
        Self {
            heatmaps: g.value(o.heatmaps).clone(),
            features: g.value(o.features).clone(),
            backbone: g.value(o.backbone).clone(),
            anchors: o.anchors.clone(),
            peaks: o.peaks.clone(),
        }
    }

    fn fields(&self) -> [&Tensor; 5] {
        [&self.heatmaps, &self.features, &self.backbone, &self.anchors, &self.peaks]
    }

    fn from_fields(mut f: Vec<Tensor>) -> Self {
        let peaks = f.pop().expect("5 fields");
        let anchors = f.pop().expect("5 fields");
        let backbone = f.pop().expect("5 fields");
        let features = f.pop().expect("5 fields");
        let heatmaps = f.pop().expect("5 fields");
        Self { heatmaps, features, backbone, anchors, peaks }
    }

    /// Frames `indices` of a stacked set.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(5);
        for t in self.fields() {
            let rows: Vec<Tensor> = indices.iter().map(|&i| t.index_first(i)).collect();
            out.push(Tensor::stack(&rows)?);
        }
        Ok(Self::from_fields(out))
    }

    /// Concatenates chunks along the frame axis.
    pub fn concat(chunks: &[ViewOutputs]) -> Result<Self> {
        let Some(first) = chunks.first() else {
            return shape_err("no chunks to concatenate");
        };
        let mut out = Vec::with_capacity(5);
        for k in 0..5 {
            let shape = first.fields()[k].shape();
            let mut data = Vec::new();
            let mut frames = 0;
            for c in chunks {
                let t = c.fields()[k];
                frames += t.dim(0);
                data.extend_from_slice(t.data());
            }
            let mut s = shape.to_vec();
            s[0] = frames;
            out.push(Tensor::new(&s, data)?);
        }
        Ok(Self::from_fields(out))
    }

    pub fn bind(&self, g: &mut Graph) -> EstimatorOutput {
        EstimatorOutput {
            heatmaps: g.constant(self.heatmaps.clone()),
            features: g.constant(self.features.clone()),
            backbone: g.constant(self.backbone.clone()),
            anchors: self.anchors.clone(),
            peaks: self.peaks.clone(),
        }
    }
}

/// Either images to run the estimator on, or its precomputed outputs.
pub enum EstimatorInput<'a> {
    Images(&'a [Tensor]),
    Cached(&'a [ViewOutputs]),
}

/// Nodes of one forward pass through the first `stage` stages.
pub struct Forward {
    pub outputs: Vec<EstimatorOutput>,
    /// Heatmaps the refiner produced, or the initial ones for an identity
    /// refiner.
    pub refined: Vec<Var>,
    /// `(initial, final)` poses.
    pub poses: Option<(Var, Var)>,
}

impl Forward {
    pub fn initial(&self) -> Vec<Var> {
        self.outputs.iter().map(|o| o.heatmaps).collect()
    }
}

pub fn forward(
    g: &mut Graph,
    ps: &ParamStore,
    cfg: &ExperimentConfig,
    rig: &RigConfig,
    input: EstimatorInput<'_>,
    stage: u8,
) -> Result<Forward> {
    let outputs = match input {
        EstimatorInput::Images(images) => {
            let vars: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
            estimate(g, ps, ESTIMATOR, &cfg.estimator, &vars)?
        }
        EstimatorInput::Cached(views) => views.iter().map(|v| v.bind(g)).collect(),
    };
    let initial: Vec<Var> = outputs.iter().map(|o| o.heatmaps).collect();
    if stage == 1 {
        return Ok(Forward { outputs, refined: initial, poses: None });
    }
    let (refined, features) = if cfg.training.identity_refiner {
        (initial, outputs.iter().map(|o| o.features).collect::<Vec<_>>())
    } else {
        let r = refine_all(g, ps, REFINER, &cfg.refiner, &outputs)?;
        (r.iter().map(|v| v.heatmaps).collect(), r.iter().map(|v| v.features).collect())
    };
    let poses = if stage >= 3 { Some(lift(g, ps, LIFTER, &cfg.lifter, rig, &features)?) } else { None };
    Ok(Forward { outputs, refined, poses })
}

fn sum_all(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return shape_err("empty loss");
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// The training objective of `stage`.
pub fn stage_loss(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    stage: u8,
    fw: &Forward,
    gt_heatmaps: &[Tensor],
    gt_poses: &Tensor,
) -> Result<Var> {
    let gt: Vec<Var> = gt_heatmaps.iter().map(|t| g.constant(t.clone())).collect();
    let initial = fw.initial();
    let heatmap_term = if stage == 1 || cfg.training.identity_refiner {
        let terms = initial.iter().zip(&gt).map(|(&p, &t)| heatmap_mse_loss(g, p, t)).collect::<Result<Vec<_>>>()?;
        sum_all(g, terms)?
    } else {
        refinement_loss(g, &fw.refined, &initial, &gt)?
    };
    let Some((first, last)) = fw.poses else {
        return Ok(heatmap_term);
    };
    let target = g.constant(gt_poses.clone());
    let l0 = pose_loss_with(g, first, target, cfg.lifter.loss)?;
    let l1 = pose_loss_with(g, last, target, cfg.lifter.loss)?;
    let pose = g.add(l0, l1)?;
    let pose = g.scale(pose, cfg.training.pose_loss_weight);
    g.add(heatmap_term, pose)
}
