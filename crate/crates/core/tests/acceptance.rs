//! Acceptance suite: one pass/fail line per criterion.
//!
//! Set `REARPOSE_SKIP_TRENDS=1` to skip the trend runs (criterion 6), which
//! train three desk-scale models.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use nalgebra::{Point3, Rotation3, Vector2, Vector3};
use rand::Rng;
use rearpose::autograd::{Graph, Var};
use rearpose::estimator2d::{anchors_and_peaks, heatmap_mse_loss, EstimatorOutput};
use rearpose::evalmetrics::{pa_mpjpe, procrustes_align, squared_residual, visibility_report, Evaluation};
use rearpose::geometry::{heatmap_center, render_gt_heatmaps, RigConfig, RigParams, Skeleton, View, NUM_HEATMAP_JOINTS, NUM_JOINTS};
use rearpose::gradcheck::{check_inputs, check_params, random_projection_loss, GradCheckReport, FD_STEP, FD_TOLERANCE};
use rearpose::harness::{
    evaluate, read_metrics, train_with, write_eval, ExperimentConfig, MetricsEntry, TrainOptions, ViewSubset, METRICS_FILE,
};
use rearpose::lifter3d::{init_lifter, lift_initial, pose_loss, project_to_features, update_pose, LifterConfig, PoseLoss};
use rearpose::nn::{Init, ParamStore};
use rearpose::nnops::{
    bilinear_sample, deformable_attention, init_deform_attn, init_self_attention, project_values, self_attention,
    DeformAttnConfig, SelfAttentionConfig,
};
use rearpose::refiner::{
    enhance_queries, init_refiner, prepare_sources, refine_all, refine_view, refinement_loss, uncertainty_masks,
    RefinerAblation, RefinerConfig,
};
use rearpose::synthio::{
    generate_dataset, joint_limits, Action, Dataset, DatasetConfig, IdentityParams, Split,
};
use rearpose::Tensor;

const INSTANCES: usize = 100;
const ATTENTION_REL_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-9;
const ALIGN_TOL_MM: f64 = 1e-4;
const ORACLE_BUDGET_S: f64 = 120.0;
const GRADIENT_BUDGET_S: f64 = 300.0;
const MASKED_VIEW_TOL: f64 = 1e-9;
const PA_ZERO_TOL_MM: f64 = 1e-6;
const GROUP_TOL_MM: f64 = 1e-9;
const ROUND_TRIP_TOL_M: f64 = 1e-9;
const TREND_BUDGET_S: f64 = 3600.0;
const VIEW_GAIN: f64 = 0.05;
const REFINER_GAIN: f64 = 0.03;
const SUITE_BUDGET_S: f64 = 600.0;
const TREND_SEED: u64 = 7;
const FRONT_REAR_SWEEP: [f64; 3] = [0.32, 0.37, 0.42];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_to_scale(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    max_abs_diff(a, b) / scale
}

// ---------------------------------------------------------------- 1: oracles

fn oracle_deformable(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let cfg = DeformAttnConfig {
        heads,
        points: r.random_range(1..=4),
        dim: heads * r.random_range(1..=3),
        value_channels: r.random_range(1..=5),
    };
    let (n, q, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(2..=6), r.random_range(2..=6));
    let mut ps = ParamStore::new();
    init_deform_attn(&mut Init::new(seed), &mut ps, "da", &cfg).unwrap();
    randomise(&mut ps, seed + 1, 1.0);
    let queries = rand_tensor(&mut r, &[n, q, cfg.dim], -1.0, 1.0);
    let anchors = Tensor::from_fn(&[n, q, 2], |i| r.random_range(-1.0..if i % 2 == 0 { w } else { h } as f64));
    let features = rand_tensor(&mut r, &[n, cfg.value_channels, h, w], -1.0, 1.0);
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let v = project_values(&mut g, &ps, "da", &cfg, f).unwrap();
    let qv = g.constant(queries.clone());
    let out = deformable_attention(&mut g, &ps, "da", &cfg, qv, &anchors, v).unwrap();
    let want = deformable_attention_oracle(&ps, "da", &cfg, &queries, &anchors, &features);
    rel_to_scale(g.value(out).data(), &want)
}

fn oracle_bilinear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w, p) = (r.random_range(1..=4), r.random_range(1..=7), r.random_range(1..=7), r.random_range(1..=12));
    let f = rand_tensor(&mut r, &[c, h, w], -2.0, 2.0);
    let coords = Tensor::from_fn(&[p, 2], |i| r.random_range(-1.5..if i % 2 == 0 { w } else { h } as f64 + 0.5));
    let got = bilinear_sample(&f, &coords).unwrap();
    let want: Vec<f64> = coords.data().chunks(2).flat_map(|xy| bilinear_oracle(&f, xy[0], xy[1])).collect();
    rel_to_scale(got.data(), &want)
}

fn oracle_self_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = r.random_range(1..=3);
    let cfg = SelfAttentionConfig { heads, dim: heads * r.random_range(1..=3), ffn_hidden: r.random_range(1..=5) };
    let (n, j) = (r.random_range(1..=2), r.random_range(1..=5));
    let mut ps = ParamStore::new();
    init_self_attention(&mut Init::new(seed), &mut ps, "sa", &cfg).unwrap();
    randomise(&mut ps, seed + 1, 1.0);
    let x = rand_tensor(&mut r, &[n, j, cfg.dim], -1.0, 1.0);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = self_attention(&mut g, &ps, "sa", &cfg, xv).unwrap();
    rel_to_scale(g.value(out).data(), &self_attention_oracle(&ps, "sa", &cfg, &x))
}

fn oracle_losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, j, h, w) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=6), r.random_range(1..=6));
    let views = r.random_range(1..=4);
    let mut g = Graph::inference();
    let mut worst = 0.0f64;
    let (mut refined, mut initial, mut gt) = (vec![], vec![], vec![]);
    let mut want_ref = 0.0;
    for _ in 0..views {
        let a = rand_tensor(&mut r, &[n, j, h, w], -0.5, 1.5);
        let b = rand_tensor(&mut r, &[n, j, h, w], -0.5, 1.5);
        let t = rand_tensor(&mut r, &[n, j, h, w], 0.0, 1.0);
        want_ref += heatmap_mse_oracle(&a, &t) + heatmap_mse_oracle(&b, &t);
        let (av, bv, tv) = (g.constant(a.clone()), g.constant(b), g.constant(t.clone()));
        let l = heatmap_mse_loss(&mut g, av, tv).unwrap();
        worst = worst.max((g.value(l).item() - heatmap_mse_oracle(&a, &t)).abs());
        refined.push(av);
        initial.push(bv);
        gt.push(tv);
    }
    let l = refinement_loss(&mut g, &refined, &initial, &gt).unwrap();
    worst = worst.max((g.value(l).item() - want_ref).abs());
    let p = rand_tensor(&mut r, &[n, NUM_JOINTS, 3], -1.0, 1.0);
    let mut q = rand_tensor(&mut r, &[n, NUM_JOINTS, 3], -1.0, 1.0);
    q.data_mut()[..3].copy_from_slice(&p.data()[..3]);
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let l = pose_loss(&mut g, pv, qv).unwrap();
    worst.max((g.value(l).item() - pose_loss_oracle(&p, &q)).abs())
}

fn random_similarity(r: &mut rand_chacha::ChaCha8Rng) -> (f64, Rotation3<f64>, Vector3<f64>) {
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let rot = Rotation3::new(axis.normalize() * r.random_range(0.0..std::f64::consts::PI));
    let t = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    (r.random_range(0.5..2.0), rot, t)
}

fn oracle_procrustes(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt = rand_tensor(&mut r, &[1, NUM_JOINTS, 3], -0.6, 0.6);
    let (s, rot, t) = random_similarity(&mut r);
    let noise = r.random_range(0.005..0.08);
    let pred: Vec<f64> = points(&gt)
        .iter()
        .flat_map(|p| {
            let q = rot * p.coords * s + t;
            [q.x, q.y, q.z].map(|v| v + r.random_range(-noise..noise))
        })
        .collect();
    let pred = Tensor::new(&[1, NUM_JOINTS, 3], pred).unwrap();
    let got = pa_mpjpe(&pred, &gt).unwrap();
    let want = mean_distance_mm(&procrustes_grid_oracle(&points(&pred), &points(&gt)), &points(&gt));
    (got - want).abs()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst = [0.0f64; 5];
    for i in 0..INSTANCES as u64 {
        worst[0] = worst[0].max(oracle_deformable(1000 + i));
        worst[1] = worst[1].max(oracle_bilinear(2000 + i));
        worst[2] = worst[2].max(oracle_self_attention(3000 + i));
        worst[3] = worst[3].max(oracle_losses(4000 + i));
        worst[4] = worst[4].max(oracle_procrustes(5000 + i));
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "{INSTANCES} instances each; rel err deform {:.1e}, bilinear {:.1e}, self-attn {:.1e}; loss abs err {:.1e}; PA-MPJPE vs grid search {:.1e} mm; {secs:.1}s",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    ensure(worst[..3].iter().all(|&e| e <= ATTENTION_REL_TOL), || detail.clone())?;
    ensure(worst[3] <= LOSS_TOL && worst[4] <= ALIGN_TOL_MM, || detail.clone())?;
    ensure(secs <= ORACLE_BUDGET_S, || format!("over budget: {detail}"))?;
    Ok(detail)
}

// --------------------------------------------------------------- 2: gradients

fn tiny_refiner() -> RefinerConfig {
    RefinerConfig {
        views: View::ALL.to_vec(),
        joints: 3,
        dim: 4,
        heads: 2,
        points: 2,
        self_attention_heads: 2,
        ffn_hidden: 4,
        feature_channels: 3,
        backbone_channels: 2,
        offset_channels: 2,
        feature_projection: true,
        heatmap_size: [4, 4],
        feature_size: [3, 2],
        heatmap_embed_hidden: 3,
        offset_hidden: 3,
        refine_hidden: 3,
        head_width: 3,
        mask_threshold: 0.5,
        ablation: RefinerAblation::default(),
    }
}

fn tiny_lifter() -> LifterConfig {
    LifterConfig {
        views: View::ALL.to_vec(),
        feature_channels: 2,
        feature_size: [5, 4],
        conv_widths: [3, 3, 4, 4],
        use_update_stage: true,
        iterations: 2,
        dim: 4,
        heads: 2,
        points: 2,
        delta_hidden: 3,
        loss: PoseLoss::Euclidean,
    }
}

/// Estimator outputs for the refiner: per view heatmaps, features and
/// backbone tensors, plus anchors and peaks.
struct ViewInputs {
    tensors: Vec<Tensor>,
    anchors: Vec<Tensor>,
    peaks: Vec<Tensor>,
}

fn view_inputs(cfg: &RefinerConfig, n: usize, seed: u64) -> ViewInputs {
    let mut r = rng(seed);
    let [hw, hh] = cfg.heatmap_size;
    let [fw, fh] = cfg.feature_size;
    let (mut tensors, mut anchors, mut peaks) = (vec![], vec![], vec![]);
    for _ in &cfg.views {
        tensors.push(rand_tensor(&mut r, &[n, cfg.joints, hh, hw], 0.0, 1.0));
        tensors.push(rand_tensor(&mut r, &[n, cfg.feature_channels, fh, fw], -1.0, 1.0));
        tensors.push(rand_tensor(&mut r, &[n, cfg.backbone_channels, 1, 1], 0.0, 1.0));
        // off-integer anchors keep the sampler away from its kinks
        anchors.push(Tensor::from_fn(&[n, cfg.joints, 2], |i| {
            let hi = if i % 2 == 0 { fw } else { fh } as f64 - 1.0;
            r.random_range(0.05..hi - 0.05) + 0.013
        }));
        peaks.push(rand_tensor(&mut r, &[n, cfg.joints], 0.0, 1.0));
    }
    ViewInputs { tensors, anchors, peaks }
}

fn estimator_outputs(vars: &[Var], inp: &ViewInputs) -> Vec<EstimatorOutput> {
    vars.chunks(3)
        .enumerate()
        .map(|(v, c)| EstimatorOutput {
            heatmaps: c[0],
            features: c[1],
            backbone: c[2],
            anchors: inp.anchors[v].clone(),
            peaks: inp.peaks[v].clone(),
        })
        .collect()
}

fn refiner_params(cfg: &RefinerConfig, seed: u64) -> ParamStore {
    let mut ps = ParamStore::new();
    init_refiner(&mut Init::new(seed), &mut ps, "r", cfg).unwrap();
    randomise(&mut ps, seed + 1, 0.6);
    ps
}

fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = vec![];
    let max = 24;
    let mut r = rng(77);

    let f = rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    let coords = Tensor::from_fn(&[7, 2], |i| r.random_range(-0.8..3.6) + if i % 2 == 0 { 0.013 } else { 0.027 });
    out.push((
        "bilinear sampling",
        check_inputs(&[f, coords], FD_STEP, max, |g, v| {
            let s = g.bilinear_sample(v[0], v[1])?;
            random_projection_loss(g, s, 1)
        })
        .unwrap(),
    ));

    let dcfg = DeformAttnConfig { heads: 2, points: 2, dim: 4, value_channels: 3 };
    let mut ps = ParamStore::new();
    init_deform_attn(&mut Init::new(2), &mut ps, "da", &dcfg).unwrap();
    randomise(&mut ps, 3, 0.5);
    let anchors = Tensor::from_fn(&[1, 3, 2], |i| r.random_range(0.2..3.6) + if i % 2 == 0 { 0.011 } else { 0.019 });
    let q = rand_tensor(&mut r, &[1, 3, 4], -1.0, 1.0);
    let feat = rand_tensor(&mut r, &[1, 3, 5, 5], -1.0, 1.0);
    out.push((
        "deformable attention",
        check_params(&ps, &[q, feat], FD_STEP, max, |g, ps, v| {
            let vals = project_values(g, ps, "da", &dcfg, v[1])?;
            let o = deformable_attention(g, ps, "da", &dcfg, v[0], &anchors, vals)?;
            random_projection_loss(g, o, 4)
        })
        .unwrap(),
    ));

    let scfg = SelfAttentionConfig { heads: 2, dim: 4, ffn_hidden: 3 };
    let mut ps = ParamStore::new();
    init_self_attention(&mut Init::new(5), &mut ps, "sa", &scfg).unwrap();
    randomise(&mut ps, 6, 0.6);
    let x = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    out.push((
        "self-attention",
        check_params(&ps, &[x], FD_STEP, max, |g, ps, v| {
            let o = self_attention(g, ps, "sa", &scfg, v[0])?;
            random_projection_loss(g, o, 7)
        })
        .unwrap(),
    ));

    let rcfg = tiny_refiner();
    let ps = refiner_params(&rcfg, 8);
    let inp = view_inputs(&rcfg, 1, 9);
    out.push((
        "query enhancement",
        check_params(&ps, &[inp.tensors[3].clone(), inp.tensors[5].clone()], FD_STEP, max, |g, ps, v| {
            let q = enhance_queries(g, ps, "r", &rcfg, View::FrontRight, v[0], v[1])?;
            random_projection_loss(g, q, 10)
        })
        .unwrap(),
    ));

    let mut ins = inp.tensors.clone();
    ins.push(rand_tensor(&mut r, &[1, rcfg.joints, rcfg.dim], -1.0, 1.0));
    out.push((
        "refine_view",
        check_params(&ps, &ins, FD_STEP, max, |g, ps, v| {
            let outs = estimator_outputs(&v[..12], &inp);
            let sources = prepare_sources(g, ps, "r", &rcfg, &outs)?;
            let rv = refine_view(g, ps, "r", &rcfg, 2, &outs, &sources, v[12])?;
            let a = random_projection_loss(g, rv.heatmaps, 11)?;
            let b = random_projection_loss(g, rv.features, 12)?;
            g.add(a, b)
        })
        .unwrap(),
    ));

    let lcfg = tiny_lifter();
    let rig = RigConfig::from_params(&RigParams::default()).unwrap();
    let mut ps = ParamStore::new();
    init_lifter(&mut Init::new(13), &mut ps, "l", &lcfg).unwrap();
    randomise(&mut ps, 14, 0.3);
    let [fw, fh] = lcfg.feature_size;
    let feats: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, &[1, lcfg.feature_channels, fh, fw], -1.0, 1.0)).collect();
    out.push((
        "lift_initial",
        check_params(&ps, &feats, FD_STEP, max, |g, ps, v| {
            let p = lift_initial(g, ps, "l", &lcfg, v)?;
            random_projection_loss(g, p, 15)
        })
        .unwrap(),
    ));
    let rest = Skeleton::default().forward_kinematics(&[[0.0; 3]; NUM_JOINTS]).to_tensor();
    let pose = Tensor::from_fn(&[1, NUM_JOINTS, 3], |i| rest.data()[i] + r.random_range(-0.02..0.02));
    let mut ins = feats.clone();
    ins.push(pose.clone());
    out.push((
        "update_pose",
        check_params(&ps, &ins, FD_STEP, max, |g, ps, v| {
            let p = update_pose(g, ps, "l", &lcfg, &rig, v[4], &v[..4], 2)?;
            random_projection_loss(g, p, 16)
        })
        .unwrap(),
    ));
    out.push((
        "fisheye feature projection",
        check_inputs(&[pose.clone()], FD_STEP, max, |g, v| {
            let p = project_to_features(g, &rig, View::RearLeft, v[0], lcfg.feature_size)?;
            random_projection_loss(g, p, 17)
        })
        .unwrap(),
    ));

    let hm = |r: &mut rand_chacha::ChaCha8Rng| rand_tensor(r, &[2, 3, 4, 4], 0.0, 1.0);
    let (a, b, c) = (hm(&mut r), hm(&mut r), hm(&mut r));
    out.push((
        "heatmap loss",
        check_inputs(&[a.clone(), c.clone()], FD_STEP, max, |g, v| heatmap_mse_loss(g, v[0], v[1])).unwrap(),
    ));
    out.push((
        "refinement loss",
        check_inputs(&[a, b, c], FD_STEP, max, |g, v| refinement_loss(g, &[v[0]], &[v[1]], &[v[2]])).unwrap(),
    ));
    let p = rand_tensor(&mut r, &[2, NUM_JOINTS, 3], -1.0, 1.0);
    let q = rand_tensor(&mut r, &[2, NUM_JOINTS, 3], -1.0, 1.0);
    out.push(("pose loss", check_inputs(&[p, q], FD_STEP, max, |g, v| pose_loss(g, v[0], v[1])).unwrap()));
    out
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let suite = gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let failing: Vec<String> = suite
        .iter()
        .filter(|(_, r)| !r.passes(FD_TOLERANCE))
        .map(|(name, r)| format!("{name} ({:.1e}, worst {:?})", r.max_rel_err, r.worst))
        .collect();
    let worst = suite.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let checked: usize = suite.iter().map(|(_, r)| r.checked).sum();
    let kinks: usize = suite.iter().map(|(_, r)| r.kinks).sum();
    ensure(failing.is_empty(), || format!("failing: {}", failing.join("; ")))?;
    ensure(secs <= GRADIENT_BUDGET_S, || format!("{secs:.1}s over budget"))?;
    Ok(format!(
        "{} ops, {checked} elements, max rel err {worst:.1e} (step {FD_STEP}, {kinks} kink re-checks); {secs:.1}s",
        suite.len()
    ))
}

// -------------------------------------------------------------- 3: invariants

fn masked_view_delta() -> f64 {
    let cfg = tiny_refiner();
    let ps = refiner_params(&cfg, 21);
    let mut inp = view_inputs(&cfg, 2, 22);
    let masked = 1;
    inp.peaks[masked] = Tensor::full(&[2, cfg.joints], 0.3);
    let run = |inp: &ViewInputs| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inp.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let outs = estimator_outputs(&vars, inp);
        let refined = refine_all(&mut g, &ps, "r", &cfg, &outs).unwrap();
        refined.iter().map(|rv| (g.value(rv.features).clone(), g.value(rv.heatmaps).clone())).collect::<Vec<_>>()
    };
    let before = run(&inp);
    let mut r = rng(23);
    let shape = inp.tensors[3 * masked + 1].shape().to_vec();
    inp.tensors[3 * masked + 1] = rand_tensor(&mut r, &shape, -5.0, 5.0);
    inp.anchors[masked] = Tensor::from_fn(&[2, cfg.joints, 2], |_| r.random_range(0.0..2.0));
    let after = run(&inp);
    let mut worst = 0.0f64;
    for (v, (b, a)) in before.iter().zip(&after).enumerate() {
        if v != masked {
            worst = worst.max(max_abs_diff(b.0.data(), a.0.data())).max(max_abs_diff(b.1.data(), a.1.data()));
        }
    }
    worst
}

fn zero_offset_delta() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(300 + seed);
        let heads = r.random_range(1..=3);
        let cfg = DeformAttnConfig { heads, points: r.random_range(1..=4), dim: heads * 2, value_channels: 3 };
        let mut ps = ParamStore::new();
        init_deform_attn(&mut Init::new(seed), &mut ps, "da", &cfg).unwrap();
        let offset = (ps.get("da.offset.w").unwrap().clone(), ps.get("da.offset.b").unwrap().clone());
        randomise(&mut ps, seed + 50, 1.0);
        ps.insert("da.offset.w", offset.0);
        ps.insert("da.offset.b", offset.1);
        let (n, q) = (2, 3);
        let feat = rand_tensor(&mut r, &[n, 3, 4, 5], -1.0, 1.0);
        let anchors = rand_tensor(&mut r, &[n, q, 2], 0.0, 3.0);
        let queries = rand_tensor(&mut r, &[n, q, cfg.dim], -1.0, 1.0);
        let mut g = Graph::inference();
        let fv = g.constant(feat.clone());
        let vals = project_values(&mut g, &ps, "da", &cfg, fv).unwrap();
        let qv = g.constant(queries);
        let out = deformable_attention(&mut g, &ps, "da", &cfg, qv, &anchors, vals).unwrap();
        let mut want = vec![];
        for ni in 0..n {
            let fmap = feat.index_first(ni);
            for qi in 0..q {
                let raw = bilinear_oracle(&fmap, anchors.at(&[ni, qi, 0]), anchors.at(&[ni, qi, 1]));
                let v = dense(&ps, "da.value", &raw);
                want.extend(dense(&ps, "da.out", &v));
            }
        }
        worst = worst.max(max_abs_diff(g.value(out).data(), &want));
    }
    worst
}

fn update_identity_delta() -> f64 {
    let cfg = tiny_lifter();
    let rig = RigConfig::from_params(&RigParams::default()).unwrap();
    let mut ps = ParamStore::new();
    init_lifter(&mut Init::new(31), &mut ps, "l", &cfg).unwrap();
    let delta: Vec<(String, Tensor)> =
        ps.iter().filter(|(k, _)| k.starts_with("l.update.delta")).map(|(k, t)| (k.clone(), t.clone())).collect();
    randomise(&mut ps, 32, 0.5);
    for (k, t) in delta {
        ps.insert(k, t);
    }
    let mut r = rng(33);
    let [fw, fh] = cfg.feature_size;
    let pose = rand_tensor(&mut r, &[2, NUM_JOINTS, 3], -0.5, 0.5);
    let mut g = Graph::inference();
    let feats: Vec<Var> =
        (0..4).map(|_| g.constant(rand_tensor(&mut r, &[2, cfg.feature_channels, fh, fw], -1.0, 1.0))).collect();
    let pv = g.constant(pose.clone());
    let out = update_pose(&mut g, &ps, "l", &cfg, &rig, pv, &feats, cfg.iterations).unwrap();
    max_abs_diff(g.value(out).data(), pose.data())
}

fn mask_is_binary_and_inclusive() -> bool {
    let tau = 0.5;
    let edge = [0.0, 0.5, f64::from_bits(0.5f64.to_bits() - 1), f64::from_bits(0.5f64.to_bits() + 1), 1.0, 0.25, 0.75];
    let mut r = rng(41);
    let mut vals = edge.to_vec();
    vals.extend((0..200).map(|_| r.random_range(0.0..1.0)));
    let peaks = Tensor::new(&[1, vals.len()], vals.clone()).unwrap();
    let m = uncertainty_masks(&peaks, tau);
    m.data().iter().zip(&vals).all(|(&mv, &p)| (mv == 0.0 || mv == 1.0) && (mv == 1.0) == (p >= tau))
        && m.data()[1] == 1.0
        && m.data()[2] == 0.0
}

fn anchor_mismatches() -> (usize, usize) {
    let rig = RigConfig::from_params(&RigParams::default()).unwrap();
    let limits = joint_limits();
    let mut r = rng(51);
    let (mut checked, mut wrong) = (0, 0);
    for i in 0..40 {
        let id = IdentityParams::sample(i, 9);
        let angles: [[f64; 3]; NUM_JOINTS] =
            std::array::from_fn(|j| std::array::from_fn(|a| r.random_range(limits[j][a].0..=limits[j][a].1)));
        let pose = id.skeleton().forward_kinematics(&angles);
        let sigma = [0.7, 1.0, 2.0][i as usize % 3];
        for view in View::ALL {
            let cam = rig.camera(view);
            let res = [16, 16];
            let hm = render_gt_heatmaps(cam, &pose, sigma, res).unwrap();
            let stack = hm.reshape(&[1, NUM_HEATMAP_JOINTS, 16, 16]).unwrap();
            let (anchors, peaks) = anchors_and_peaks(&stack, 1.0).unwrap();
            for c in 0..NUM_HEATMAP_JOINTS {
                if let Some([u, v]) = heatmap_center(cam, &pose, c + 1, res) {
                    checked += 1;
                    let ok = anchors.at(&[0, c, 0]) == u as f64 && anchors.at(&[0, c, 1]) == v as f64 && peaks.at(&[0, c]) == 1.0;
                    wrong += usize::from(!ok);
                }
            }
        }
    }
    (checked, wrong)
}

fn criterion_3() -> Outcome {
    let masked = masked_view_delta();
    let zero = zero_offset_delta();
    let ident = update_identity_delta();
    let binary = mask_is_binary_and_inclusive();
    let (checked, wrong) = anchor_mismatches();
    let detail = format!(
        "masked-view delta {masked:.1e}; zero-offset delta {zero:.1e}; zero-init update delta {ident:.1e}; mask binary/inclusive {binary}; anchors {}/{checked} exact",
        checked - wrong
    );
    ensure(masked <= MASKED_VIEW_TOL && zero <= MASKED_VIEW_TOL && ident == 0.0, || detail.clone())?;
    ensure(binary && wrong == 0 && checked > 0, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ 4: metrics

fn criterion_4() -> Outcome {
    let mut r = rng(61);
    let (mut pa_zero, mut violations, mut gap) = (0.0f64, 0, 0.0f64);
    for _ in 0..INSTANCES {
        let gt = rand_tensor(&mut r, &[4, NUM_JOINTS, 3], -0.6, 0.6);
        let mut exact = Vec::new();
        for n in 0..4 {
            let (s, rot, t) = random_similarity(&mut r);
            for p in points(&gt.index_first(n)) {
                let q = rot * p.coords * s + t;
                exact.extend([q.x, q.y, q.z]);
            }
        }
        let exact = Tensor::new(&[4, NUM_JOINTS, 3], exact).unwrap();
        pa_zero = pa_zero.max(pa_mpjpe(&exact, &gt).unwrap());

        let noisy = Tensor::from_fn(&[4, NUM_JOINTS, 3], |i| exact.data()[i] + r.random_range(-0.1..0.1));
        let aligned = procrustes_align(&noisy, &gt).unwrap();
        for n in 0..4 {
            let g = points(&gt.index_first(n));
            let before = squared_residual(&points(&noisy.index_first(n)), &g);
            let after = squared_residual(&points(&aligned.index_first(n)), &g);
            violations += usize::from(after > before + 1e-12);
        }

        let mut ev = Evaluation::default();
        ev.add_poses(&noisy, &gt, &[Action::Walking; 4], &[0; 4]).unwrap();
        let rep = ev.report().unwrap();
        let all = rep.groups.iter().find(|g| g.name == "all").ok_or("no `all` group")?;
        gap = gap.max((all.mpjpe_mm - rep.mpjpe_mm).abs());
    }
    let detail = format!(
        "PA-MPJPE of similarity transforms {pa_zero:.1e} mm; {violations} samples worse after alignment; |all − MPJPE| {gap:.1e} mm"
    );
    ensure(pa_zero <= PA_ZERO_TOL_MM && violations == 0 && gap <= GROUP_TOL_MM, || detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------- 5: geometry

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_5() -> Outcome {
    let rig = RigConfig::from_params(&RigParams::default()).unwrap();
    let mut r = rng(71);
    let mut round_trip = 0.0f64;
    for view in View::ALL {
        let cam = rig.camera(view);
        for _ in 0..500 {
            let theta = r.random_range(0.0..cam.fov_limit * 0.999);
            let phi = r.random_range(0.0..std::f64::consts::TAU);
            let depth = r.random_range(0.05..3.0);
            let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let p_cam = Point3::from(dir * depth);
            let p = cam.pose.inverse_transform_point(&p_cam);
            let proj = cam.project(&p);
            let ray = cam.unproject(&Vector2::new(proj.pixel.x, proj.pixel.y)).map_err(|e| e.to_string())?;
            round_trip = round_trip.max(ray.distance_to(&p));
        }
    }

    let limits = joint_limits();
    let mut bone = 0.0f64;
    for i in 0..200 {
        let sk = IdentityParams::sample(i, 3).skeleton();
        let angles: [[f64; 3]; NUM_JOINTS] =
            std::array::from_fn(|j| std::array::from_fn(|a| r.random_range(limits[j][a].0..=limits[j][a].1)));
        let pose = sk.forward_kinematics(&angles);
        for j in 1..NUM_JOINTS {
            let p = sk.parent_index[j].unwrap();
            bone = bone.max(((pose.point(j) - pose.point(p)).norm() - sk.bone_lengths[j]).abs());
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tiny_dataset(&dir.path().join("a"), 11);
    tiny_dataset(&dir.path().join("b"), 11);
    let files = files_under(&dir.path().join("a"));
    let same = files == files_under(&dir.path().join("b"))
        && files.iter().all(|f| fs::read(dir.path().join("a").join(f)).unwrap() == fs::read(dir.path().join("b").join(f)).unwrap());

    let ids: Vec<BTreeSet<u32>> =
        Split::ALL.iter().map(|s| a.manifest.splits[s].identities.iter().copied().collect()).collect();
    let mut disjoint = ids[0].is_disjoint(&ids[1]) && ids[0].is_disjoint(&ids[2]) && ids[1].is_disjoint(&ids[2]);

    let cams = &a.manifest.rig;
    let res = a.manifest.config.render.heatmap_size;
    let (mut records, mut argmax_wrong) = (0, 0);
    for split in Split::ALL {
        for i in 0..a.len(split) {
            let rec = a.load(split, i, &View::ALL).map_err(|e| e.to_string())?;
            disjoint &= ids[split as usize].contains(&rec.identity_id);
            records += 1;
            for (view, vr) in &rec.views {
                let stack = vr.heatmaps.clone().reshape(&[1, NUM_HEATMAP_JOINTS, res[1], res[0]]).unwrap();
                let (anchors, _) = anchors_and_peaks(&stack, 1.0).unwrap();
                for c in 0..NUM_HEATMAP_JOINTS {
                    let ok = match heatmap_center(cams.camera(*view), &rec.gt_pose, c + 1, res) {
                        Some([u, v]) => anchors.at(&[0, c, 0]) == u as f64 && anchors.at(&[0, c, 1]) == v as f64,
                        None => vr.heatmaps.index_first(c).max_abs() == 0.0,
                    };
                    argmax_wrong += usize::from(!ok);
                }
            }
        }
    }
    let detail = format!(
        "round trip {round_trip:.1e} m; bone length error {bone:.1e} m; regeneration byte-identical {same} ({} files); identities disjoint {disjoint}; argmax mismatches {argmax_wrong} over {records} records",
        files.len()
    );
    ensure(round_trip <= ROUND_TRIP_TOL_M && bone <= ROUND_TRIP_TOL_M, || detail.clone())?;
    ensure(same && disjoint && argmax_wrong == 0 && records > 0, || detail.clone())?;
    Ok(detail)
}

// -------------------------------------------------------------------- 6: trends

fn best_stage3(metrics: &[MetricsEntry]) -> Option<&MetricsEntry> {
    metrics.iter().filter(|m| m.stage == 3).min_by(|a, b| a.selection_metric().total_cmp(&b.selection_metric()))
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    generate_dataset(&DatasetConfig::default(), TREND_SEED, &data).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&data, None).map_err(|e| e.to_string())?;
    let gen_secs = t.elapsed().as_secs_f64();

    let run = |name: &str, views: ViewSubset, identity: bool, stage1: Option<PathBuf>| -> Result<(f64, Vec<MetricsEntry>), String> {
        let mut cfg = ExperimentConfig::desk(TREND_SEED);
        cfg.dataset = data.clone();
        cfg.out = dir.path().join(name);
        cfg.views = views;
        cfg.training.identity_refiner = identity;
        let cfg = cfg.resolved().map_err(|e| e.to_string())?;
        let out = train_with(&cfg, &ds, &TrainOptions { stage1_from: stage1, ..TrainOptions::default() })
            .map_err(|e| format!("{name}: {e}"))?;
        let ckpt = out.final_checkpoint.ok_or_else(|| format!("{name}: no final checkpoint"))?;
        let ev = evaluate(&ckpt, &ds, Split::Test, None).map_err(|e| e.to_string())?;
        let rep = write_eval(&cfg.out.join("eval"), "test", &ev).map_err(|e| e.to_string())?;
        Ok((rep.mpjpe_mm, read_metrics(&cfg.out).map_err(|e| e.to_string())?))
    };
    let (four, four_metrics) = run("four_view", ViewSubset::FourView, false, None)?;
    let stage1 = dir.path().join("four_view/checkpoints/stage1-best");
    let (ident, _) = run("identity_refiner", ViewSubset::FourView, true, Some(stage1))?;
    let (front, _) = run("two_front", ViewSubset::TwoFront, false, None)?;

    let best = best_stage3(&four_metrics).ok_or("no stage-3 metrics")?;
    let initial = best.val_initial_mse.all.ok_or("no initial MSE")?;
    let refined = best.val_refined_mse.as_ref().and_then(|m| m.all).ok_or("no refined MSE")?;

    let vis = visibility_report(&ds, Split::Test, &FRONT_REAR_SWEEP).map_err(|e| e.to_string())?;
    let row = vis.rows.iter().find(|r| r.label == "dataset").ok_or("no dataset visibility row")?;
    let side = |front: bool| {
        let rates: Vec<f64> = row.rates.iter().filter(|(v, _)| v.is_front() == front).map(|(_, r)| r.hands()).collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    let (front_hands, rear_hands) = (side(true), side(false));
    let secs = t.elapsed().as_secs_f64();

    let view_gain = (front - four) / front;
    let refiner_gain = (ident - four) / ident;
    let checks = [
        ("a", view_gain >= VIEW_GAIN, format!("4-view {four:.2} mm vs 2-front {front:.2} mm ({:+.1}%)", 100.0 * view_gain)),
        ("b", refiner_gain >= REFINER_GAIN, format!("refiner {four:.2} mm vs identity {ident:.2} mm ({:+.1}%)", 100.0 * refiner_gain)),
        ("c", refined < initial, format!("val heatmap MSE refined {refined:.2} vs initial {initial:.2}")),
        ("d", front_hands > rear_hands, format!("hand visibility front {:.1}% vs rear {:.1}%", 100.0 * front_hands, 100.0 * rear_hands)),
        ("budget", secs <= TREND_BUDGET_S, format!("{secs:.0}s incl. {gen_secs:.0}s data generation")),
    ];
    let detail = checks.iter().map(|(k, ok, d)| format!("({k}) {} {d}", if *ok { "ok" } else { "FAILED" })).collect::<Vec<_>>().join("; ");
    ensure(checks.iter().all(|c| c.1), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7: operations

fn criterion_7(suite_secs: f64) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let ds = tiny_dataset(&data, 2);
    let a = tiny_config(&data, &dir.path().join("a"), ViewSubset::FourView);
    let b = ExperimentConfig { out: dir.path().join("b"), ..a.clone() };
    let c = ExperimentConfig { out: dir.path().join("c"), ..a.clone() };
    let opts = TrainOptions::default();
    train_with(&a, &ds, &opts).map_err(|e| e.to_string())?;
    train_with(&b, &ds, &opts).map_err(|e| e.to_string())?;
    train_with(&c, &ds, &TrainOptions { stop_after: Some((2, 1)), ..TrainOptions::default() }).map_err(|e| e.to_string())?;
    train_with(&c, &ds, &TrainOptions { resume: true, ..TrainOptions::default() }).map_err(|e| e.to_string())?;
    let read = |p: PathBuf| fs::read(p).unwrap_or_default();
    let same = |x: &ExperimentConfig, y: &ExperimentConfig, f: &str| {
        let l = read(x.out.join(f));
        !l.is_empty() && l == read(y.out.join(f))
    };
    let deterministic = same(&a, &b, METRICS_FILE) && same(&a, &b, "final/weights.egt");
    let resumed = same(&a, &c, METRICS_FILE) && same(&a, &c, "final/weights.egt") && same(&a, &c, "final/optimizer.egt");
    let mut reports = vec![];
    for _ in 0..2 {
        let ev = evaluate(&a.out.join("final"), &ds, Split::Test, None).map_err(|e| e.to_string())?;
        write_eval(&a.out.join("eval"), "test", &ev).map_err(|e| e.to_string())?;
        reports.push((read(a.out.join("eval/test.json")), read(a.out.join("eval/test_samples.csv"))));
    }
    let idempotent = !reports[0].0.is_empty() && reports[0] == reports[1];
    let detail = format!(
        "identical logs and weights {deterministic}; resume equivalent {resumed}; evaluate idempotent {idempotent}; non-trend acceptance time {suite_secs:.0}s"
    );
    ensure(deterministic && resumed && idempotent && suite_secs <= SUITE_BUDGET_S, || detail.clone())?;
    Ok(detail)
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> (bool, f64) {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = t.elapsed().as_secs_f64();
    match &res {
        Ok(d) => println!("criterion {n} {name}: PASS ({d})"),
        Err(d) => println!("criterion {n} {name}: FAIL ({d})"),
    }
    (res.is_ok(), secs)
}

fn main() {
    let skip_trends = std::env::var_os("REARPOSE_SKIP_TRENDS").is_some_and(|v| v != "0");
    let mut results = vec![
        run(1, "oracle equivalence", criterion_1),
        run(2, "gradient suite", criterion_2),
        run(3, "architectural invariants", criterion_3),
        run(4, "metric invariants", criterion_4),
        run(5, "geometry and data invariants", criterion_5),
    ];
    let elapsed: f64 = results.iter().map(|r| r.1).sum();
    results.push(run(7, "operational", || criterion_7(elapsed)));
    if skip_trends {
        println!("criterion 6 trend reproduction: SKIPPED (REARPOSE_SKIP_TRENDS set)");
    } else {
        results.push(run(6, "trend reproduction", criterion_6));
    }
    if !results.iter().all(|r| r.0) {
        std::process::exit(1);
    }
}
