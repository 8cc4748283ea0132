use hypergen::analysis::{
    accuracy, calibrate_on_references, classify, double_sidedness, reference_order_params, seed_dependence,
    strongest_connection, AlgorithmLabel, CalibrationConfig, OrderParams,
};
use hypergen::constructors::{
    active_hidden_units, build_convexity, build_double_sided, build_pudding, build_pudding_imperfect,
    ConstructorConfig, ConvexityDist, PuddingSign,
};
use hypergen::network::{evaluate, l1_mean, l1_std, sample_batch, MlpSpec, TaskBatch};
use hypergen::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn shared_batch() -> TaskBatch<f64> {
    sample_batch(16, 100_000, &mut ChaCha8Rng::seed_from_u64(0xBA7C)).unwrap()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

#[test]
fn exact_constructions_at_16_by_48() {
    let cfg = ConstructorConfig::new(16, 48);
    let batch = shared_batch();
    let ds = evaluate(&build_double_sided::<f64>(&cfg).unwrap(), &batch).unwrap();
    let pudding = build_pudding::<f64>(&cfg).unwrap();
    let pd = evaluate(&pudding, &batch).unwrap();
    assert!(ds < 1e-4, "double-sided {ds:e}");
    assert!(pd < 1e-3, "pudding {pd:e}");
    assert_eq!(active_hidden_units(&pudding), 17);
    let positive = build_pudding::<f64>(&cfg.clone().with_sign(PuddingSign::Positive)).unwrap();
    assert!(evaluate(&positive, &batch).unwrap() < 1e-3);
}

#[test]
fn imperfect_pudding_is_worse_than_exact() {
    let cfg = ConstructorConfig::new(16, 48);
    let batch = shared_batch();
    let exact = evaluate(&build_pudding::<f64>(&cfg).unwrap(), &batch).unwrap();
    let imperfect = evaluate(&build_pudding_imperfect::<f64>(&cfg).unwrap(), &batch).unwrap();
    assert!(imperfect.is_finite());
    assert!(imperfect > exact, "{imperfect:e} vs {exact:e}");
}

#[test]
fn convexity_fit_beats_constant_predictor() {
    let cfg = ConstructorConfig::new(16, 48);
    let batch = shared_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let conv = evaluate(&build_convexity::<f64, _>(&cfg, &mut rng).unwrap(), &batch).unwrap();
    assert!(conv > 0.0 && conv < 1.0, "{conv}");
}

#[test]
fn convexity_seed_dependence_near_one() {
    let cfg = ConstructorConfig::new(16, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = build_convexity::<f64, _>(&cfg, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = build_convexity::<f64, _>(&cfg, &mut rng).unwrap();
    let a3 = OrderParams::of(&a, Some(&b)).unwrap().alpha3.unwrap();
    assert!((a3 - 1.0).abs() < 0.1, "{a3}");
}

#[test]
fn pudding_constructor_standardization_matches_closed_form() {
    // At x = 0 every exact construction outputs the standardized zero.
    let cfg = ConstructorConfig::new(16, 48);
    let zero = Tensor::zeros(&[1, 16]);
    let expect = -l1_mean(16) / l1_std(16);
    for net in [
        build_double_sided::<f64>(&cfg).unwrap(),
        build_pudding::<f64>(&cfg).unwrap(),
    ] {
        let y = net.forward(&zero).unwrap().item().unwrap();
        assert!((y - expect).abs() < 1e-9, "{y} vs {expect}");
    }
}

#[test]
fn constructors_respect_shapes_for_many_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n0 in 1..6 {
        for n1 in [n0 + 1, 2 * n0, 3 * n0 + 2] {
            let mut cfg = ConstructorConfig::new(n0, n1);
            cfg.calibration_samples = 2_000;
            let mut nets = vec![
                build_pudding::<f64>(&cfg).unwrap(),
                build_convexity::<f64, _>(&cfg, &mut rng).unwrap(),
            ];
            if n1 >= 2 * n0 {
                nets.push(build_double_sided::<f64>(&cfg).unwrap());
                nets.push(build_pudding_imperfect::<f64>(&cfg).unwrap());
            }
            for net in nets {
                net.validate().unwrap();
                assert_eq!(net.spec(), MlpSpec::l1(n0, n1));
                assert!(net.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite()));
            }
        }
    }
}

#[test]
fn order_parameter_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = gaussian(16, 48, &mut rng);
    assert_eq!(seed_dependence(&w, &w).unwrap(), 0.0);
    assert_eq!(seed_dependence(&w, &w.scale(-1.0)).unwrap(), 2.0);
    let base1 = double_sidedness(&w).unwrap().value;
    let base2 = strongest_connection(&w).unwrap();
    for c in [1e-3, 0.7, 3.0, 250.0] {
        let cw = w.scale(c);
        let a1 = double_sidedness(&cw).unwrap().value;
        let a2 = strongest_connection(&cw).unwrap();
        assert!((a1 - base1).abs() <= 1e-12 * base1.abs().max(1.0), "α₁ at c={c}");
        assert!((a2 - c * base2).abs() <= 1e-12 * (c * base2).max(1.0), "α₂ at c={c}");
    }
}

#[test]
fn independent_gaussian_pairs_have_unit_seed_dependence() {
    // one trial has sd ≈ 1/√768 ≈ 0.036
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sum = 0.0;
    for _ in 0..100 {
        let a = gaussian(16, 48, &mut rng);
        let b = gaussian(16, 48, &mut rng);
        let a3 = seed_dependence(&a, &b).unwrap();
        assert!((a3 - 1.0).abs() < 0.18, "{a3}");
        sum += a3;
    }
    assert!((sum / 100.0 - 1.0).abs() < 0.1);
}

#[test]
fn classifier_generalizes_to_held_out_references() {
    let mut cfg = CalibrationConfig::new(16, 48);
    let th = calibrate_on_references(&cfg).unwrap();
    assert!(th.theta1 > th.theta2 && th.theta2 > 0.0, "{th:?}");
    cfg.samples_per_class = 50;
    let held_out = reference_order_params(&cfg, cfg.seed ^ 0xFFFF).unwrap();
    assert_eq!(held_out.len(), 150);
    assert_eq!(accuracy(&held_out, &th).unwrap(), 1.0);
}

#[test]
fn imperfect_pudding_classifies_as_pudding() {
    let cfg = CalibrationConfig::new(16, 48);
    let th = calibrate_on_references(&cfg).unwrap();
    for sign in [PuddingSign::Negative, PuddingSign::Positive] {
        let net = build_pudding_imperfect::<f64>(&ConstructorConfig::new(16, 48).with_sign(sign)).unwrap();
        let op = OrderParams::of(&net, None).unwrap();
        assert_eq!(
            classify(&op, Some(&th)).unwrap(),
            AlgorithmLabel::Pudding,
            "{sign:?}: {op:?}"
        );
    }
}

#[test]
fn classification_ignores_seed_dependence() {
    let cfg = CalibrationConfig::new(16, 48);
    let th = calibrate_on_references(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = ConstructorConfig::new(16, 48).with_convexity(ConvexityDist::Unimodal { sigma: 0.8 });
    let net = build_convexity::<f64, _>(&c, &mut rng).unwrap();
    let op = OrderParams::of(&net, None).unwrap();
    let base = classify(&op, Some(&th)).unwrap();
    for a3 in [0.0, 0.5, 1.0, 2.0] {
        let with = OrderParams { alpha3: Some(a3), ..op };
        assert_eq!(classify(&with, Some(&th)).unwrap(), base);
    }
}

#[test]
fn target_moments_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5D);
    for n in [4, 16, 32] {
        let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
        for _ in 0..10 {
            let batch = sample_batch::<f64, _>(n, 100_000, &mut rng).unwrap();
            for (r, &y) in batch.targets.data().iter().enumerate() {
                let l1: f64 = batch.inputs.row(r).iter().map(|x| x.abs()).sum();
                assert!((y - (l1 - l1_mean(n)) / l1_std(n)).abs() < 1e-12);
                sum += l1;
                sq += l1 * l1;
                count += 1.0;
            }
        }
        let mean = sum / count;
        let var = sq / count - mean * mean;
        assert!((mean / l1_mean(n) - 1.0).abs() < 5e-3, "n={n} mean {mean}");
        assert!((var / l1_std(n).powi(2) - 1.0).abs() < 5e-3, "n={n} var {var}");
    }
}
