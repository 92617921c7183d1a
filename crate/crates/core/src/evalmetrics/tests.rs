use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Skeleton, NUM_HEATMAP_JOINTS};

fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let sk = Skeleton::default();
    let mut data = Vec::new();
    for _ in 0..n {
        let angles: [[f64; 3]; NUM_JOINTS] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)));
        data.extend(sk.forward_kinematics(&angles).to_tensor().into_data());
    }
    Tensor::new(&[n, NUM_JOINTS, 3], data).unwrap()
}

fn perturb(rng: &mut ChaCha8Rng, t: &Tensor, std: f64) -> Tensor {
    Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-std..std))
}

fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
    let axis = Unit::new_normalize(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0));
    Similarity {
        scale: rng.random_range(0.5..2.0),
        rotation: *Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).matrix(),
        translation: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    }
}

fn transform(t: &Tensor, sim: &Similarity) -> Tensor {
    let d: Vec<f64> = t.data().chunks(3).flat_map(|c| sim.apply(&Point3::new(c[0], c[1], c[2])).coords.iter().copied().collect::<Vec<_>>()).collect();
    Tensor::new(t.shape(), d).unwrap()
}

#[test]
fn mpjpe_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_poses(&mut rng, 4);
    assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    let shifted = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + if i % 3 == 1 { 0.010 } else { 0.0 });
    assert!((mpjpe(&shifted, &gt).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn mpjpe_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_poses(&mut rng, 7);
    let pred = perturb(&mut rng, &gt, 0.05);
    let mut sum = 0.0;
    for n in 0..7 {
        for j in 0..NUM_JOINTS {
            let mut sq = 0.0;
            for c in 0..3 {
                sq += (pred.at(&[n, j, c]) - gt.at(&[n, j, c])).powi(2);
            }
            sum += sq.sqrt();
        }
    }
    assert!((mpjpe(&pred, &gt).unwrap() - sum / (7.0 * 16.0) * 1000.0).abs() < 1e-9);
}

#[test]
fn bad_batches_are_errors() {
    let empty = Tensor::zeros(&[0, NUM_JOINTS, 3]);
    assert!(matches!(mpjpe(&empty, &empty), Err(Error::EmptyBatch)));
    assert!(matches!(pa_mpjpe(&empty, &empty), Err(Error::EmptyBatch)));
    let a = Tensor::zeros(&[2, NUM_JOINTS, 3]);
    let b = Tensor::zeros(&[3, NUM_JOINTS, 3]);
    assert!(matches!(mpjpe(&a, &b), Err(Error::Shape(_))));
    let c = Tensor::zeros(&[2, 15, 3]);
    assert!(matches!(mpjpe(&c, &c), Err(Error::Shape(_))));
}

#[test]
fn identity_alignment_recovers_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_poses(&mut rng, 1);
    let p = points(&gt, 0);
    let sim = procrustes(&p, &p).unwrap();
    assert!((sim.scale - 1.0).abs() < 1e-9);
    assert!((sim.rotation - Matrix3::identity()).abs().max() < 1e-9);
    assert!(sim.translation.norm() < 1e-9);
    assert!(pa_mpjpe(&gt, &gt).unwrap() < 1e-6);
}

#[test]
fn similarity_transforms_are_removed() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let gt = random_poses(&mut rng, 3);
        let pred = transform(&gt, &random_similarity(&mut rng));
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
        assert!(mpjpe(&pred, &gt).unwrap() > 1.0);
    }
}

#[test]
fn reflections_are_not_used() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random_poses(&mut rng, 1);
    let mirrored = Tensor::from_fn(gt.shape(), |i| if i % 3 == 0 { -gt.data()[i] } else { gt.data()[i] });
    let sim = procrustes(&points(&mirrored, 0), &points(&gt, 0)).unwrap();
    assert!((sim.rotation.determinant() - 1.0).abs() < 1e-9);
    assert!(sim.scale > 0.0);
    assert!(pa_mpjpe(&mirrored, &gt).unwrap() > 1.0);
}

#[test]
fn degenerate_predictions_report_the_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = random_poses(&mut rng, 3);
    let mut pred = gt.clone();
    for j in 0..NUM_JOINTS {
        for c in 0..3 {
            pred.set(&[1, j, c], if c == 0 { j as f64 * 0.1 } else { 0.2 });
        }
    }
    match pa_mpjpe(&pred, &gt) {
        Err(Error::Degenerate { sample, reason }) => {
            assert_eq!(sample, 1);
            assert!(reason.contains("collinear"), "{reason}");
        }
        r => panic!("expected degenerate, got {r:?}"),
    }
    for j in 0..NUM_JOINTS {
        for c in 0..3 {
            pred.set(&[1, j, c], 0.3);
        }
    }
    let mut ev = Evaluation::new();
    ev.add_poses(&gt, &gt, &[Action::Walking; 3], &[0; 3]).unwrap();
    match ev.add_poses(&pred, &gt, &[Action::Walking; 3], &[0; 3]) {
        Err(Error::Degenerate { sample, reason }) => {
            assert_eq!(sample, 4);
            assert!(reason.contains("coincide"), "{reason}");
        }
        r => panic!("expected degenerate, got {r:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pa_mpjpe_is_similarity_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_poses(&mut rng, 2);
        let pred = perturb(&mut rng, &gt, 0.08);
        let moved = transform(&pred, &random_similarity(&mut rng));
        let (a, b) = (pa_mpjpe(&pred, &gt).unwrap(), pa_mpjpe(&moved, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn alignment_never_increases_residual(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_poses(&mut rng, 1);
        let pred = perturb(&mut rng, &gt, 0.1);
        let (p, g) = (points(&pred, 0), points(&gt, 0));
        let sim = procrustes(&p, &g).unwrap();
        let aligned: Vec<_> = p.iter().map(|q| sim.apply(q)).collect();
        prop_assert!(squared_residual(&aligned, &g) <= squared_residual(&p, &g) + 1e-15);
    }

    #[test]
    fn mpjpe_sees_translations(seed in 0u64..10_000, t in prop::array::uniform3(-0.2f64..0.2)) {
        prop_assume!(t.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_poses(&mut rng, 2);
        let pred = perturb(&mut rng, &gt, 0.03);
        let moved = Tensor::from_fn(pred.shape(), |i| pred.data()[i] + t[i % 3]);
        prop_assert!((mpjpe(&moved, &gt).unwrap() - mpjpe(&pred, &gt).unwrap()).abs() > 1e-6);
        prop_assert!((pa_mpjpe(&moved, &gt).unwrap() - pa_mpjpe(&pred, &gt).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn uniform_errors_give_uniform_groups() {
    let rows = per_group_report(&[7.5; NUM_JOINTS], &default_groups()).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| (r.mpjpe_mm - 7.5).abs() < 1e-12));
}

#[test]
fn upper_body_zero_weights_all_by_mass() {
    let mut e = [0.0; NUM_JOINTS];
    e[8..].iter_mut().for_each(|v| *v = 12.0);
    let rows = per_group_report(&e, &default_groups()).unwrap();
    let get = |n: &str| rows.iter().find(|r| r.name == n).unwrap().mpjpe_mm;
    assert_eq!(get("upper body"), 0.0);
    assert_eq!(get("lower body"), 12.0);
    assert!((get("all") - 0.5 * 12.0).abs() < 1e-12);
}

#[test]
fn groups_match_loop_and_reject_unknown_names() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e: [f64; NUM_JOINTS] = std::array::from_fn(|_| rng.random_range(0.0..50.0));
    let groups = default_groups();
    for (g, r) in groups.iter().zip(per_group_report(&e, &groups).unwrap()) {
        let mut s = 0.0;
        for name in &g.joints {
            s += e[JOINT_NAMES.iter().position(|n| n == name).unwrap()];
        }
        assert!((r.mpjpe_mm - s / g.joints.len() as f64).abs() < 1e-9);
    }
    let bad = [JointGroup::new("x", &["left_hand", "tail"])];
    assert!(matches!(per_group_report(&e, &bad), Err(Error::UnknownJoint(n)) if n == "tail"));
}

#[test]
fn report_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ev = Evaluation::new();
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for b in 0..3 {
        let gt = random_poses(&mut rng, 5);
        let pred = perturb(&mut rng, &gt, 0.04);
        let actions: Vec<Action> = (0..5).map(|i| Action::ALL[(i + b) % 3]).collect();
        ev.add_poses(&pred, &gt, &actions, &[b as u32; 5]).unwrap();
        all_pred.extend_from_slice(pred.data());
        all_gt.extend_from_slice(gt.data());
    }
    let pred = Tensor::new(&[15, NUM_JOINTS, 3], all_pred).unwrap();
    let gt = Tensor::new(&[15, NUM_JOINTS, 3], all_gt).unwrap();
    let r = ev.report().unwrap();
    assert_eq!(r.samples, 15);
    assert!((r.mpjpe_mm - mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
    assert!((r.pa_mpjpe_mm - pa_mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
    let all = r.groups.iter().find(|g| g.name == "all").unwrap();
    assert!((all.mpjpe_mm - r.mpjpe_mm).abs() < 1e-9);
    assert_eq!(r.actions.iter().map(|a| a.samples).sum::<usize>(), 15);
    let weighted: f64 = r.actions.iter().map(|a| a.mpjpe_mm * a.samples as f64).sum::<f64>() / 15.0;
    assert!((weighted - r.mpjpe_mm).abs() < 1e-9);
    assert_eq!(r.heatmap_mse, HeatmapMse::default());
    assert_eq!(ev.samples_csv().lines().count(), 16);
    assert_eq!(r, ev.clone().report().unwrap());
    assert_eq!(r.to_json(), ev.report().unwrap().to_json());
    assert!(r.to_text().contains("upper body"));
}

#[test]
fn heatmap_mse_is_per_pixel_by_side() {
    let mut ev = Evaluation::new();
    let z = Tensor::zeros(&[2, NUM_HEATMAP_JOINTS, 4, 4]);
    let o = Tensor::full(&[2, NUM_HEATMAP_JOINTS, 4, 4], 0.01);
    ev.add_heatmaps(View::FrontLeft, &o, &z).unwrap();
    ev.add_heatmaps(View::FrontRight, &z, &z).unwrap();
    ev.add_heatmaps(View::RearLeft, &o, &z).unwrap();
    let gt = random_poses(&mut ChaCha8Rng::seed_from_u64(10), 1);
    ev.add_poses(&gt, &gt, &[Action::Boxing], &[1]).unwrap();
    let r = ev.report().unwrap();
    assert!((r.heatmap_mse.front.unwrap() - 0.5).abs() < 1e-12);
    assert!((r.heatmap_mse.back.unwrap() - 1.0).abs() < 1e-12);
    assert!((r.heatmap_mse.all.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.mpjpe_mm, 0.0);
    assert!(ev.add_heatmaps(View::RearLeft, &o, &Tensor::zeros(&[1])).is_err());
}

#[test]
fn visibility_rows_count_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames: Vec<BTreeMap<View, [bool; NUM_HEATMAP_JOINTS]>> = (0..40)
        .map(|_| View::ALL.into_iter().map(|v| (v, std::array::from_fn(|_| rng.random_bool(0.4)))).collect())
        .collect();
    let row = visibility_row("x", 0.37, &frames);
    for v in View::ALL {
        let count = |j: usize| frames.iter().filter(|f| f[&v][j - 1]).count() as f64 / 40.0;
        let r = &row.rates[&v];
        assert_eq!(r.left_hand, count(6));
        assert_eq!(r.right_hand, count(7));
        assert_eq!(r.left_foot, count(12));
        assert_eq!(r.right_foot, count(13));
    }
    let all: Vec<_> = (0..5).map(|_| View::ALL.into_iter().map(|v| (v, [true; NUM_HEATMAP_JOINTS])).collect()).collect();
    let full = visibility_row("all", 0.37, &all);
    assert!(full.rates.values().all(|r| r.hands() == 1.0 && r.feet() == 1.0));
    let t = VisibilityTable { rows: vec![full] }.to_text();
    assert!(t.contains("100.0%"));
}
