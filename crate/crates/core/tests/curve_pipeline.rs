//! End-to-end masking-curve behavior on an untrained model: grid shape,
//! cumulative-mask monotonicity, ratio-0 equivalence, and determinism.

use maskprobe_core::data::{evaluate_metric, generate, Metric, TaskConfig, TaskKind};
use maskprobe_core::faith::{masking_curve, CurveOptions};
use maskprobe_core::ims::Measure;
use maskprobe_core::masf::masf_fit;
use maskprobe_core::model::{ModelCheckpoint, ModelConfig};
use maskprobe_core::rng::derive_rng;
use maskprobe_core::train::{predict_dataset, ValStrategy};

fn fixture() -> (ModelCheckpoint, maskprobe_core::masf::MasfCalibration, maskprobe_core::data::Dataset)
{
    let task = TaskConfig {
        kind: TaskKind::Keyword,
        vocab_size: 32,
        min_content_len: 6,
        max_content_len: 10,
        num_classes: 2,
        evidence_per_class: 1,
        redundancy: 1,
        class_priors: vec![0.7, 0.3],
        train_size: 8,
        validation_size: 150,
        test_size: 40,
        metric: Metric::Accuracy,
        seed: 77,
    };
    let (_, validation, test) = generate(&task).unwrap();
    let config = ModelConfig {
        vocab_size: 32,
        max_seq_len: 11,
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        num_classes: 2,
        mask_token_id: 2,
        pad_token_id: 0,
        cls_token_id: 1,
        seed: 3,
    };
    let mut model = ModelCheckpoint::init(config).unwrap();
    let mut rng = derive_rng(3, "curve-test/model");
    use rand::Rng;
    model.params.for_each_mut(|_, t| {
        for v in t.as_mut_slice() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    });
    let mut fit_rng = derive_rng(4, "curve-test/fit");
    let calibration = masf_fit(&model, &validation, ValStrategy::Masking, &mut fit_rng).unwrap();
    (model, calibration, test)
}

#[test]
fn curve_has_eleven_points_and_starts_at_plain_performance() {
    let (model, calibration, test) = fixture();
    let curve = masking_curve(
        &model,
        &test,
        Measure::Random,
        false,
        &calibration,
        Metric::Accuracy,
        &CurveOptions::default(),
        1,
    )
    .unwrap();

    assert_eq!(curve.ratios.len(), 11);
    assert_eq!(curve.performance.len(), 11);
    assert_eq!(curve.masf_pvalues.len(), 11);
    assert_eq!(curve.ratios[0], 0.0);
    assert_eq!(*curve.ratios.last().unwrap(), 1.0);
    for w in curve.ratios.windows(2) {
        assert!(w[0] < w[1]);
    }

    let predictions = predict_dataset(&model, &test).unwrap();
    let plain = evaluate_metric(
        &predictions,
        &test.labels(),
        test.num_classes,
        Metric::Accuracy,
    )
    .unwrap();
    assert_eq!(curve.performance[0], plain);
}

#[test]
fn curves_are_deterministic_given_the_seed() {
    let (model, calibration, test) = fixture();
    let make = |seed| {
        masking_curve(
            &model,
            &test,
            Measure::Random,
            false,
            &calibration,
            Metric::Accuracy,
            &CurveOptions::default(),
            seed,
        )
        .unwrap()
    };
    assert_eq!(make(5), make(5));
    // A different seed reorders the random masking, which shows up in the
    // traces even when the untrained model's predictions do not move.
    assert_ne!(make(5).masf_pvalues, make(6).masf_pvalues);
}

#[test]
fn recursive_and_consumed_orders_both_reach_full_masking() {
    let (model, calibration, test) = fixture();
    for (measure, recursive) in [
        (Measure::LeaveOneOut(maskprobe_core::ims::Variant::Absolute), true),
        (Measure::LeaveOneOut(maskprobe_core::ims::Variant::Absolute), false),
    ] {
        let small = maskprobe_core::data::Dataset {
            split: test.split,
            num_classes: test.num_classes,
            observations: test.observations[..6].to_vec(),
        };
        let curve = masking_curve(
            &model,
            &small,
            measure,
            recursive,
            &calibration,
            Metric::Accuracy,
            &CurveOptions::default(),
            2,
        )
        .unwrap();
        // At 100% masking every maskable token is the mask id, so every
        // observation collapses to the same prediction per length pattern;
        // the curve must still be finite and defined.
        assert!(curve.performance.iter().all(|p| p.is_finite()));
    }
}
