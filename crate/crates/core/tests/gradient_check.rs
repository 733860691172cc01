//! Autodiff soundness: analytic gradients against central finite
//! differences, for parameter coordinates (through the training loss) and
//! embedding coordinates (through the explained logit).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use maskprobe_core::model::{
    encoder_grads, ModelCheckpoint, ModelConfig, Observation, Parameters,
};
use maskprobe_core::rng::derive_rng;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
/// Below this magnitude both sides sit in finite-difference noise.
const NOISE_FLOOR: f64 = 1e-7;

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_heads = [1, 2][rng.random_range(0..2)];
    let hidden_dim = num_heads * [4, 8][rng.random_range(0..2)];
    ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        num_layers: rng.random_range(1..=2),
        hidden_dim,
        num_heads,
        num_classes: rng.random_range(2..=3),
        mask_token_id: 2,
        pad_token_id: 0,
        cls_token_id: 1,
        seed: rng.random(),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelCheckpoint {
    let mut model = ModelCheckpoint::init(random_config(rng)).unwrap();
    // Knock every tensor off its initialization (the head in particular
    // starts at zero).
    model.params.for_each_mut(|_, t| {
        for v in t.as_mut_slice() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    });
    model
}

fn random_obs(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Observation {
    let len = rng.random_range(3..=config.max_seq_len);
    let mut tokens = vec![config.cls_token_id];
    tokens.extend((1..len).map(|_| rng.random_range(3..config.vocab_size as u32)));
    Observation {
        tokens,
        label: rng.random_range(0..config.num_classes),
        maskable: (1..len).collect(),
        length: len,
    }
}

fn param_count(params: &Parameters) -> usize {
    let mut count = 0;
    params.for_each(|_, t| count += t.len());
    count
}

fn read_param(params: &Parameters, flat: usize) -> f64 {
    let mut remaining = flat;
    let mut out = None;
    params.for_each(|_, t| {
        if out.is_none() {
            if remaining < t.len() {
                out = Some(t.as_slice()[remaining]);
            } else {
                remaining -= t.len();
            }
        }
    });
    out.expect("flat index in range")
}

fn bump_param(params: &mut Parameters, flat: usize, delta: f64) {
    let mut remaining = flat;
    let mut done = false;
    params.for_each_mut(|_, t| {
        if !done {
            if remaining < t.len() {
                t.as_mut_slice()[remaining] += delta;
                done = true;
            } else {
                remaining -= t.len();
            }
        }
    });
    assert!(done, "flat index in range");
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < NOISE_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = derive_rng(2024, "gradcheck/params");
    let mut checked = 0;
    for _ in 0..24 {
        let model = random_model(&mut rng);
        let obs = random_obs(&model.config, &mut rng);
        let (_, grads) = encoder_grads(&model, &obs).unwrap();
        let total = param_count(&model.params);

        for _ in 0..6 {
            let flat = rng.random_range(0..total);
            let analytic = read_param(&grads, flat);
            let numeric = {
                let eval = |delta: f64| {
                    let mut bumped = model.clone();
                    bump_param(&mut bumped.params, flat, delta);
                    encoder_grads(&bumped, &obs).unwrap().0
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            };
            let err = relative_error(analytic, numeric);
            assert!(
                err < REL_TOL,
                "parameter coordinate {flat}: analytic {analytic} vs numeric {numeric} (rel {err})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "checked only {checked} coordinates");
}

#[test]
fn embedding_gradients_match_central_differences() {
    let mut rng = derive_rng(2025, "gradcheck/embeddings");
    let mut checked = 0;
    for _ in 0..24 {
        let model = random_model(&mut rng);
        let obs = random_obs(&model.config, &mut rng);
        let target = rng.random_range(0..model.config.num_classes);
        let bundle = model.input_gradient(&obs, target).unwrap();

        for _ in 0..4 {
            let t = rng.random_range(0..obs.tokens.len());
            let d = rng.random_range(0..model.config.hidden_dim);
            let token = obs.tokens[t] as usize;
            if obs.tokens.iter().filter(|&&tok| tok as usize == token).count() > 1 {
                // A shared embedding row mixes positions under bumping.
                continue;
            }
            let numeric = {
                let eval = |delta: f64| {
                    let mut bumped = model.clone();
                    let v = bumped.params.token_embedding.get(token, d);
                    bumped.params.token_embedding.set(token, d, v + delta);
                    bumped.logits(&obs).unwrap()[target]
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            };
            let analytic = bundle.embedding_grad.get(t, d);
            let err = relative_error(analytic, numeric);
            assert!(
                err < REL_TOL,
                "embedding [{t},{d}]: analytic {analytic} vs numeric {numeric} (rel {err})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "checked only {checked} coordinates");
}

#[test]
fn gradient_bundle_onehot_consistency_holds_exactly() {
    let mut rng = derive_rng(2026, "gradcheck/onehot");
    for _ in 0..5 {
        let model = random_model(&mut rng);
        let obs = random_obs(&model.config, &mut rng);
        let bundle = model.input_gradient(&obs, 0).unwrap();
        for _ in 0..50 {
            let t = rng.random_range(0..obs.tokens.len());
            let v = rng.random_range(0..model.config.vocab_size);
            let expected: f64 = model
                .params
                .token_embedding
                .row(v)
                .iter()
                .zip(bundle.embedding_grad.row(t))
                .map(|(a, b)| a * b)
                .sum();
            assert_eq!(bundle.onehot_grad.get(t, v), expected);
        }
    }
}

#[test]
fn unused_position_has_zero_gradient() {
    // With padding masked out of attention, a padded position's token
    // embedding cannot influence the logit.
    let mut rng = derive_rng(2027, "gradcheck/unused");
    let model = random_model(&mut rng);
    let pad = model.config.pad_token_id;
    let obs = Observation {
        tokens: vec![model.config.cls_token_id, 4, 5, 6, pad, pad],
        label: 0,
        maskable: vec![1, 2, 3],
        length: 4,
    };
    let bundle = model.input_gradient(&obs, 0).unwrap();
    for t in [4, 5] {
        for d in 0..model.config.hidden_dim {
            assert_eq!(bundle.embedding_grad.get(t, d), 0.0);
        }
    }
}
