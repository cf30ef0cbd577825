use super::*;
use crate::odometry::{label_mkps, transfer_distances};
use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

fn small_spec() -> MlpSpec {
    MlpSpec {
        point_widths: vec![5, 7, 8],
        head_widths: vec![6],
        input_scale: 1.0,
    }
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize) -> Vec<f64> {
    (0..rows * MKP_WIDTH)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

fn tensors_mut(net: &mut PointNet) -> Vec<&mut Vec<f64>> {
    net.layers_mut()
        .flat_map(|d| [&mut d.weight, &mut d.bias])
        .collect()
}

fn tensors(net: &PointNet) -> Vec<(String, Vec<f64>)> {
    net.layers()
        .flat_map(|(n, d)| {
            [
                (format!("{n}.weight"), d.weight.clone()),
                (format!("{n}.bias"), d.bias.clone()),
            ]
        })
        .collect()
}

/// Central differences on every entry (or the given sample of entries) of
/// every tensor; returns the worst per-tensor relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
fn gradient_check(
    net: &PointNet,
    loss: &dyn Fn(&PointNet) -> f64,
    analytic: &PointNet,
    entries_per_tensor: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let h = 1e-6;
    let grads = tensors(analytic);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let n_tensors = grads.len();
    for t in 0..n_tensors {
        let len = grads[t].1.len();
        let idx: Vec<usize> = match entries_per_tensor {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = tensors_mut(&mut probe)[t][i];
            tensors_mut(&mut probe)[t][i] = orig + h;
            let up = loss(&probe);
            tensors_mut(&mut probe)[t][i] = orig - h;
            let down = loss(&probe);
            tensors_mut(&mut probe)[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[t].1[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    worst
}

/// Worst relative error over the three networks of a random model.
pub(crate) fn model_gradient_error(
    spec: &MlpSpec,
    seed: u64,
    rows: usize,
    sample: Option<usize>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RegressionModel::random(spec, seed);
    // Zero biases put rows whose previous layer is fully inactive exactly on
    // a ReLU kink, where central differences see half a derivative.
    for net in [
        &mut model.selection,
        &mut model.rotation,
        &mut model.translation,
    ] {
        for d in net.layers_mut() {
            d.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let input = random_input(&mut rng, rows);
    let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2u8)).collect();
    let target = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );

    let (_, g_sel) = selection_loss_grad(&model.selection, &input, &labels);
    let sel_loss = |n: &PointNet| selection_loss(n.forward(&input, rows).output(), &labels);
    let mut worst = gradient_check(&model.selection, &sel_loss, &g_sel, sample, &mut rng);

    for net in [&model.rotation, &model.translation] {
        let (_, g) = regression_loss_grad(net, &input, rows, &target);
        let loss = |n: &PointNet| {
            let o = n.forward(&input, rows);
            (0..3).map(|i| (o.output()[i] - target[i]).powi(2)).sum()
        };
        worst = worst.max(gradient_check(net, &loss, &g, sample, &mut rng));
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_every_entry() {
    for seed in 0..10 {
        let err = model_gradient_error(&small_spec(), seed, 6, None);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn gradients_match_finite_differences_at_full_width() {
    let err = model_gradient_error(&MlpSpec::default(), 42, 8, Some(12));
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn zero_weights_give_half_scores_and_zero_regression() {
    let model = RegressionModel::zeros(&MlpSpec::default());
    let set = synthetic_samples(1, 30, 0.2, 3).pop().unwrap().mkps;
    let sel = selection_forward(&model.selection, &set, 10, 0.05);
    assert!(sel.scores.iter().all(|&s| s == 0.5));
    assert_eq!(sel.top_k, (0..10).collect::<Vec<_>>());
    assert_eq!(
        rotation_forward(&model.rotation, &set, 0.05),
        Vector3::zeros()
    );
    assert_eq!(
        translation_forward(&model.translation, &set, 0.05),
        Vector3::zeros()
    );
}

#[test]
fn top_k_is_capped_and_breaks_ties_low() {
    assert_eq!(top_k_indices(&[0.2, 0.9, 0.2, 0.9, 0.1], 3), vec![1, 3, 0]);
    assert_eq!(top_k_indices(&[0.5, 0.4], 100), vec![0, 1]);
    assert_eq!(
        top_k_indices(&vec![0.5; 1000], 100),
        (0..100).collect::<Vec<_>>(),
        "100 of 1000 at the default operating point"
    );
}

#[test]
fn rotation_loss_examples() {
    let gt = UnitQuaternion::recover(&Vector3::new(0.1, 0.0, 0.0)).quaternion;
    assert_eq!(rotation_loss(&gt.vector_part(), &gt), 0.0);
    assert!((rotation_loss(&Vector3::zeros(), &gt) - 0.01).abs() < 1e-15);
    assert_eq!(
        translation_loss(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)),
        0.0
    );
}

#[test]
fn bce_matches_naive_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<f64> = (0..50).map(|_| rng.random_range(-8.0..8.0)).collect();
    let labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..2u8)).collect();
    let naive: f64 = logits
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z).exp());
            if y == 1 {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum::<f64>()
        / 50.0;
    assert!((selection_loss(&logits, &labels) - naive).abs() < 1e-12);
    assert!(selection_loss(&[1e4, -1e4], &[1, 0]).abs() < 1e-12);
}

#[test]
fn augmentation_with_zero_range_is_identity() {
    let s = synthetic_samples(1, 40, 0.0, 1).pop().unwrap();
    let (m, g) = augment_rotation(&s.mkps, &s.gt, 0.0, 7).unwrap();
    assert_eq!(m, s.mkps);
    assert_eq!(g, s.gt);
    assert!(augment_rotation(&s.mkps, &s.gt, -1.0, 7).is_err());
}

#[test]
fn augmented_pairs_are_exact_under_augmented_pose() {
    let beta_max = 3f64.to_radians();
    for seed in 0..100 {
        let s = synthetic_samples(1, 50, 0.0, seed).pop().unwrap();
        let (m, g) = augment_rotation(&s.mkps, &s.gt, beta_max, seed).unwrap();
        let d = transfer_distances(&m, &g);
        assert!(
            d.iter().all(|&d| d < 1e-12),
            "seed {seed}: {:e}",
            d.iter().cloned().fold(0.0, f64::max)
        );
        let labelled = label_mkps(&m, &g, 1e-9).unwrap();
        assert!(labelled.labels.unwrap().iter().all(|&l| l == 1));
        // The left side is untouched and the yaw really changed the pose.
        for i in 0..m.len() {
            assert_eq!(m.left(i), s.mkps.left(i));
        }
        let beta = g.compose(&s.gt.inverse()).rotation_angle();
        assert!(beta < beta_max);
    }
}

#[test]
fn single_sample_is_memorized() {
    let sample = synthetic_samples(1, 32, 0.25, 11);
    let spec = MlpSpec::default();
    let mut model = RegressionModel::random(&spec, 11);
    let input = network_input(&sample[0].mkps, spec.input_scale);
    let labels = sample[0].mkps.labels.clone().unwrap();
    let q = UnitQuaternion::from_pose(&sample[0].gt).vector_part();
    let t = sample[0].gt.translation;
    // Adam at 1e-4 is still around 7e-4 after 2000 steps; memorization is
    // about capacity and gradients, not the training-rate default.
    let lr = 1e-3;
    let (mut os, mut or, mut ot) = (
        Adam::new(&model.selection, lr),
        Adam::new(&model.rotation, lr),
        Adam::new(&model.translation, lr),
    );
    let mut steps = 0;
    let total = loop {
        let (ls, gs) = selection_loss_grad(&model.selection, &input, &labels);
        let (lr_, gr) = regression_loss_grad(&model.rotation, &input, 32, &q);
        let (lt, gt) = regression_loss_grad(&model.translation, &input, 32, &t);
        let total = ls + lr_ + lt;
        if total < 1e-4 || steps == 2000 {
            break total;
        }
        os.step(&mut model.selection, &gs);
        or.step(&mut model.rotation, &gr);
        ot.step(&mut model.translation, &gt);
        steps += 1;
    };
    assert!(total < 1e-4, "loss {total:e} after {steps} steps");
}

#[test]
fn training_is_reproducible_and_reduces_rotation_error() {
    let train_set = synthetic_samples(500, 24, 0.2, 100);
    let validation = synthetic_samples(50, 24, 0.0, 200);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 4,
        ..TrainConfig::default()
    };
    let spec = MlpSpec::default();
    let a = train(&train_set, &cfg, &spec, 16).unwrap();
    let b = train(&train_set, &cfg, &spec, 16).unwrap();
    assert_eq!(loss_curve_csv(&a.curve), loss_curve_csv(&b.curve));
    assert_eq!(a.curve.len(), 8);

    let untrained = RegressionModel::random(&spec, cfg.seed);
    let before = rotation_error_deg(&untrained.rotation, &validation, spec.input_scale);
    let after = rotation_error_deg(&a.model.rotation, &validation, spec.input_scale);
    assert!(after < before, "trained {after} vs untrained {before}");
}

#[test]
fn loss_curve_csv_leaves_untrained_columns_empty() {
    let curve = vec![
        EpochLoss {
            stage: Stage::Selection,
            epoch: 1,
            selection: Some(0.5),
            rotation: None,
            translation: None,
        },
        EpochLoss {
            stage: Stage::Regression,
            epoch: 1,
            selection: None,
            rotation: Some(0.25),
            translation: Some(2.0),
        },
    ];
    assert_eq!(
        loss_curve_csv(&curve),
        "stage,epoch,selection_bce,rotation_l2,translation_l2\nselection,1,0.5,,\nregression,1,,0.25,2.0\n"
    );
}

#[test]
fn training_rejects_bad_input_and_reports_divergence() {
    let spec = small_spec();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(train(&[], &cfg, &spec, 4).is_err());
    let mut unlabelled = synthetic_samples(1, 8, 0.0, 0);
    unlabelled[0].mkps.labels = None;
    assert!(train(&unlabelled, &cfg, &spec, 4).is_err());
    assert!(train(
        &synthetic_samples(1, 8, 0.0, 0),
        &TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        },
        &spec,
        4
    )
    .is_err());

    let mut huge = synthetic_samples(2, 8, 0.0, 0);
    for s in &mut huge {
        for row in &mut s.mkps.pairs {
            for v in row.iter_mut() {
                *v *= 1e150;
            }
        }
        s.gt.translation *= 1e200;
    }
    match train(&huge, &cfg, &spec, 4) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
    }
}

#[test]
fn checkpoint_round_trip() {
    let spec = small_spec();
    let mut model = RegressionModel::random(&spec, 3);
    for net in [
        &mut model.selection,
        &mut model.rotation,
        &mut model.translation,
    ] {
        for d in net.layers_mut() {
            for v in d.weight.iter_mut().chain(d.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path(), "model").unwrap();
    assert_eq!(load_checkpoint(dir.path(), "model").unwrap(), model);

    let manifest: checkpoint::Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.tensors[0].name, "selection.point.0.weight");
    assert_eq!(manifest.tensors[0].shape, vec![5, 6]);
    let floats: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    assert_eq!(
        std::fs::metadata(dir.path().join("model.bin"))
            .unwrap()
            .len() as usize,
        4 * floats
    );

    std::fs::write(dir.path().join("model.bin"), [0u8; 12]).unwrap();
    assert!(load_checkpoint(dir.path(), "model").is_err());
}

#[test]
fn estimate_returns_a_valid_pose() {
    let model = RegressionModel::random(&small_spec(), 9);
    let s = synthetic_samples(1, 20, 0.1, 9).pop().unwrap();
    let (pose, _) = model.estimate(&s.mkps, 10).unwrap();
    assert!(pose.orthonormality_error() < 1e-9);
    assert!(model.estimate(&MkpSet::default(), 10).is_err());
}

proptest! {
    #[test]
    fn selection_scores_are_permutation_equivariant(seed in any::<u64>(), m in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RegressionModel::random(&small_spec(), seed);
        let set = MkpSet::new((0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect());
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let a = selection_forward(&model.selection, &set, m, 1.0);
        let b = selection_forward(&model.selection, &set.select(&perm), m, 1.0);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.scores[j], a.scores[i]);
            prop_assert!((0.0..=1.0).contains(&b.scores[j]));
        }
    }

    #[test]
    fn pooled_heads_are_permutation_invariant(seed in any::<u64>(), m in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RegressionModel::random(&small_spec(), seed);
        let set = MkpSet::new((0..m).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect());
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let shuffled = set.select(&perm);
        prop_assert_eq!(rotation_forward(&model.rotation, &set, 1.0), rotation_forward(&model.rotation, &shuffled, 1.0));
        prop_assert_eq!(translation_forward(&model.translation, &set, 1.0), translation_forward(&model.translation, &shuffled, 1.0));
    }

    #[test]
    fn recovered_rotation_output_is_a_unit_quaternion(seed in any::<u64>(), m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RegressionModel::random(&small_spec(), seed);
        let set = MkpSet::new((0..m).map(|_| std::array::from_fn(|_| rng.random_range(-20.0..20.0))).collect());
        let q = UnitQuaternion::recover(&rotation_forward(&model.rotation, &set, 1.0)).quaternion;
        prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        prop_assert!(q.a >= 0.0);
    }

    #[test]
    fn losses_are_non_negative_and_zero_only_at_target(
        p in prop::array::uniform3(-1.0..1.0f64),
        g in prop::array::uniform3(-0.5..0.5f64),
    ) {
        let (p, g) = (Vector3::from(p), Vector3::from(g));
        let l = translation_loss(&p, &g);
        let oracle = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2);
        prop_assert!((l - oracle).abs() < 1e-12);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, p == g);
        let q = UnitQuaternion::recover(&g).quaternion;
        prop_assert!((rotation_loss(&p, &q) - oracle).abs() < 1e-12);
    }
}
