//! Statistical behavior of the MaSF test under the in-distribution null.
//!
//! None of these need a trained model: calibration and scoring data only
//! have to come from the same distribution, so a fixed random-weight model
//! over freshly generated synthetic data is a valid null.

use rand::Rng;

use maskprobe_core::data::{generate, Dataset, Metric, TaskConfig, TaskKind};
use maskprobe_core::masf::{
    masf_fit, masf_fit_with_floor, masf_pvalue, masf_pvalues_for_dataset, read_calibration,
    write_calibration, MasfCalibration,
};
use maskprobe_core::model::{ModelCheckpoint, ModelConfig};
use maskprobe_core::rng::derive_rng;
use maskprobe_core::stats::{ks_distance_two_sample, ks_distance_uniform};
use maskprobe_core::train::{build_validation, ValStrategy};

fn task(seed: u64, validation_size: usize, test_size: usize) -> TaskConfig {
    TaskConfig {
        kind: TaskKind::Keyword,
        vocab_size: 32,
        min_content_len: 6,
        max_content_len: 11,
        num_classes: 2,
        evidence_per_class: 1,
        redundancy: 1,
        class_priors: vec![0.7, 0.3],
        train_size: 8,
        validation_size,
        test_size,
        metric: Metric::Accuracy,
        seed,
    }
}

fn model(seed: u64) -> ModelCheckpoint {
    let config = ModelConfig {
        vocab_size: 32,
        max_seq_len: 12,
        num_layers: 2,
        hidden_dim: 4,
        num_heads: 2,
        num_classes: 2,
        mask_token_id: 2,
        pad_token_id: 0,
        cls_token_id: 1,
        seed,
    };
    let mut model = ModelCheckpoint::init(config).unwrap();
    let mut rng = derive_rng(seed, "masf-test/model");
    model.params.for_each_mut(|_, t| {
        for v in t.as_mut_slice() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    });
    model
}

fn fit(
    model: &ModelCheckpoint,
    validation: &Dataset,
    rng_seed: u64,
) -> MasfCalibration {
    let mut rng = derive_rng(rng_seed, "masf-test/fit");
    masf_fit(model, validation, ValStrategy::Masking, &mut rng).unwrap()
}

#[test]
fn calibration_holds_one_cdf_per_layer_dim_layer_and_observation() {
    let model = model(1);
    let (_, validation, _) = generate(&task(10, 120, 8)).unwrap();
    let calibration = fit(&model, &validation, 5);
    // L = 2, H = 4: 8 stage-1 tables, 2 stage-2, 1 stage-3.
    assert_eq!(calibration.num_layers(), 2);
    assert_eq!(calibration.hidden_dim(), 4);
    let mut stage1_count = 0;
    for l in 0..calibration.num_layers() {
        for h in 0..calibration.hidden_dim() {
            assert!(!calibration.stage1_cdf(l, h).is_empty());
            stage1_count += 1;
        }
    }
    assert_eq!(stage1_count, 8);
    assert_eq!(calibration.stage2_cdf(0).len(), validation.len());
    assert_eq!(calibration.stage3_cdf().len(), validation.len());
}

#[test]
fn floor_is_enforced() {
    let model = model(1);
    let (_, validation, _) = generate(&task(10, 20, 8)).unwrap();
    let mut rng = derive_rng(5, "masf-test/floor");
    let err = masf_fit(&model, &validation, ValStrategy::Masking, &mut rng);
    assert!(err.is_err());
    let mut rng = derive_rng(5, "masf-test/floor");
    assert!(
        masf_fit_with_floor(&model, &validation, ValStrategy::Masking, &mut rng, 10).is_ok()
    );
}

#[test]
fn held_out_null_pvalues_are_approximately_uniform() {
    let model = model(2);
    let (_, validation, _) = generate(&task(11, 300, 8)).unwrap();
    let calibration = fit(&model, &validation, 6);

    // A held-out draw from the same distribution, masked the same way.
    let (_, held_out, _) = generate(&task(999, 200, 8)).unwrap();
    let mut mask_rng = derive_rng(7, "masf-test/held-out-mask");
    let masked = build_validation(
        &held_out,
        ValStrategy::Masking,
        model.config.mask_token_id,
        &mut mask_rng,
    );
    let pvalues = masf_pvalues_for_dataset(&model, &calibration, &masked).unwrap();
    assert_eq!(pvalues.len(), 200);

    let ks = ks_distance_uniform(&pvalues);
    assert!(ks < 0.1, "KS distance {ks} against Uniform(0,1)");

    let mean: f64 = pvalues.iter().sum::<f64>() / pvalues.len() as f64;
    assert!((0.35..=0.65).contains(&mean), "mean p {mean}");
}

#[test]
fn recalibration_with_a_different_seed_is_stable() {
    let model = model(3);
    let (_, validation, _) = generate(&task(12, 250, 8)).unwrap();
    let cal_a = fit(&model, &validation, 100);
    let cal_b = fit(&model, &validation, 200);

    let (_, held_out, _) = generate(&task(888, 200, 8)).unwrap();
    let mut mask_rng = derive_rng(8, "masf-test/stability-mask");
    let masked = build_validation(
        &held_out,
        ValStrategy::Masking,
        model.config.mask_token_id,
        &mut mask_rng,
    );
    let ps_a = masf_pvalues_for_dataset(&model, &cal_a, &masked).unwrap();
    let ps_b = masf_pvalues_for_dataset(&model, &cal_b, &masked).unwrap();
    let ks = ks_distance_two_sample(&ps_a, &ps_b);
    assert!(ks < 0.15, "recalibration shifted p-values by KS {ks}");
}

#[test]
fn inflating_an_activation_never_raises_the_pvalue() {
    let model = model(4);
    let (_, validation, test) = generate(&task(13, 150, 8)).unwrap();
    let calibration = fit(&model, &validation, 9);

    for obs in &test.observations {
        let (_, trace) = model.forward(obs, true).unwrap();
        let trace = trace.unwrap();
        let baseline_p = masf_pvalue(&calibration, &trace).unwrap();

        let mut perturbed = trace.clone();
        let cal_max = calibration
            .stage1_cdf(0, 0)
            .samples()
            .last()
            .copied()
            .unwrap();
        perturbed.layers[0].set(0, 0, 10.0 * cal_max.abs().max(1.0));
        let perturbed_p = masf_pvalue(&calibration, &perturbed).unwrap();
        assert!(
            perturbed_p <= baseline_p + 1e-12,
            "perturbed {perturbed_p} vs baseline {baseline_p}"
        );
    }
}

#[test]
fn pvalues_stay_above_the_clamp_floor() {
    let model = model(5);
    let (_, validation, _) = generate(&task(14, 120, 8)).unwrap();
    let calibration = fit(&model, &validation, 10);
    let floor = 1.0 / (validation.len() as f64 + 1.0);

    // Even a wildly out-of-range trace cannot reach zero.
    let (_, trace) = model
        .forward(&validation.observations[0], true)
        .unwrap();
    let mut trace = trace.unwrap();
    for layer in &mut trace.layers {
        for v in layer.as_mut_slice() {
            *v = 1e6;
        }
    }
    let p = masf_pvalue(&calibration, &trace).unwrap();
    assert!(p > 0.0 && p >= floor * 0.9, "clamped p {p}");
}

#[test]
fn calibration_file_roundtrip_is_exact() {
    let model = model(6);
    let (_, validation, _) = generate(&task(15, 120, 8)).unwrap();
    let calibration = fit(&model, &validation, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("masf.cal");
    write_calibration(&path, &calibration).unwrap();
    let back = read_calibration(&path).unwrap();
    assert_eq!(back, calibration);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let model_small = model(7);
    let (_, validation, _) = generate(&task(16, 120, 8)).unwrap();
    let calibration = fit(&model_small, &validation, 12);

    let mut wide_config = model_small.config.clone();
    wide_config.hidden_dim = 8;
    wide_config.num_heads = 2;
    let wide = ModelCheckpoint::init(wide_config).unwrap();
    let (_, trace) = wide.forward(&validation.observations[0], true).unwrap();
    assert!(masf_pvalue(&calibration, &trace.unwrap()).is_err());
}
