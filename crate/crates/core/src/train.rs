//! Masked fine-tuning.
//!
//! Training mixes two objectives in every mini-batch: ordinary unmasked
//! classification, and classification under a uniformly sampled masking
//! ratio. The strategy enums span the full ablation matrix, from plain
//! fine-tuning (`NoMasking`/`NoMasking`) to masked fine-tuning
//! (`Use5050`/`UseBoth`).
//!
//! Epoch selection is retrospective: training always runs to
//! `max_epochs`, the strategy-built validation set is scored after every
//! epoch, and the checkpoint of the best epoch (earliest on ties) is
//! returned.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_metric, Dataset, Metric};
use crate::error::{Error, Result};
use crate::model::{
    apply_mask, encoder_grads, ModelCheckpoint, ModelConfig, Observation, Parameters,
    TokenClassifier, TokenId, TrainingMeta,
};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStrategy {
    NoMasking,
    Masking,
    Use5050,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValStrategy {
    NoMasking,
    Masking,
    UseBoth,
}

impl std::fmt::Display for TrainStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainStrategy::NoMasking => "no-masking",
            TrainStrategy::Masking => "masking",
            TrainStrategy::Use5050 => "use5050",
        })
    }
}

impl std::fmt::Display for ValStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValStrategy::NoMasking => "no-masking",
            ValStrategy::Masking => "masking",
            ValStrategy::UseBoth => "use-both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Decay of the squared-gradient running average.
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Steps of linear learning-rate warmup; 0 disables it.
    pub warmup_steps: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 5e-3,
            batch_size: 32,
            max_epochs: 20,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            warmup_steps: 10,
        }
    }
}

/// One uniformly sampled masking rate.
pub fn sample_mask_ratio(rng: &mut ChaCha8Rng) -> f64 {
    rng.random()
}

/// Mask a uniformly sampled ratio of the observation's maskable positions.
///
/// The count is `round(u * |maskable|)` with `u ~ Uniform[0, 1]`, chosen
/// uniformly without replacement.
pub fn mask_observation(
    obs: &Observation,
    mask_id: TokenId,
    rng: &mut ChaCha8Rng,
) -> Observation {
    let m = obs.maskable.len();
    if m == 0 {
        return obs.clone();
    }
    let ratio = sample_mask_ratio(rng);
    let count = (ratio * m as f64).round() as usize;
    let positions: Vec<usize> = rand::seq::index::sample(rng, m, count)
        .into_iter()
        .map(|i| obs.maskable[i])
        .collect();
    apply_mask(obs, &positions, mask_id).expect("maskable positions are maskable")
}

/// Apply a training strategy to one mini-batch.
///
/// `Use5050` leaves the first `ceil(n/2)` observations of the already
/// shuffled batch untouched and masks the rest; the split is positional,
/// not a per-observation coin flip.
pub fn mask_minibatch(
    batch: &[Observation],
    strategy: TrainStrategy,
    mask_id: TokenId,
    rng: &mut ChaCha8Rng,
) -> Vec<Observation> {
    match strategy {
        TrainStrategy::NoMasking => batch.to_vec(),
        TrainStrategy::Masking => batch
            .iter()
            .map(|obs| mask_observation(obs, mask_id, rng))
            .collect(),
        TrainStrategy::Use5050 => {
            let keep = batch.len().div_ceil(2);
            batch
                .iter()
                .enumerate()
                .map(|(i, obs)| {
                    if i < keep {
                        obs.clone()
                    } else {
                        mask_observation(obs, mask_id, rng)
                    }
                })
                .collect()
        }
    }
}

/// Build the validation set a strategy scores against.
///
/// `UseBoth` concatenates an unmasked copy and a masked copy, in that
/// order, doubling the size.
pub fn build_validation(
    dataset: &Dataset,
    strategy: ValStrategy,
    mask_id: TokenId,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let observations = match strategy {
        ValStrategy::NoMasking => dataset.observations.clone(),
        ValStrategy::Masking => dataset
            .observations
            .iter()
            .map(|obs| mask_observation(obs, mask_id, rng))
            .collect(),
        ValStrategy::UseBoth => {
            let mut all = dataset.observations.clone();
            all.extend(
                dataset
                    .observations
                    .iter()
                    .map(|obs| mask_observation(obs, mask_id, rng)),
            );
            all
        }
    };
    Dataset {
        split: dataset.split,
        num_classes: dataset.num_classes,
        observations,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation_metric: f64,
    pub mean_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub checkpoint: ModelCheckpoint,
    pub seed: u64,
    pub train_strategy: TrainStrategy,
    pub val_strategy: ValStrategy,
}

/// Run masked fine-tuning and return the best-epoch checkpoint.
pub fn train(
    config: &ModelConfig,
    metric: Metric,
    train_set: &Dataset,
    validation_set: &Dataset,
    train_strategy: TrainStrategy,
    val_strategy: ValStrategy,
    hyperparams: &Hyperparams,
    seed: u64,
) -> Result<TrainReport> {
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::Empty("training or validation dataset"));
    }
    let mut config = config.clone();
    config.seed = derive_seed(seed, "init");
    let mut model = ModelCheckpoint::init(config.clone())?;
    let mask_id = config.mask_token_id;

    let mut shuffle_rng = derive_rng(seed, "train/shuffle");
    let mut mask_rng = derive_rng(seed, "train/mask");
    let mut val_rng = derive_rng(seed, "train/validation-mask");

    // The masked validation copy is fixed before training so that epoch
    // scores are comparable.
    let scored_validation = build_validation(validation_set, val_strategy, mask_id, &mut val_rng);

    let mut rms_state = model.params.zeros_like();
    let mut epochs = Vec::with_capacity(hyperparams.max_epochs);
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut step = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..hyperparams.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(hyperparams.batch_size) {
            let batch: Vec<Observation> = chunk
                .iter()
                .map(|&i| train_set.observations[i].clone())
                .collect();
            let batch = mask_minibatch(&batch, train_strategy, mask_id, &mut mask_rng);

            let per_obs: Vec<(f64, Parameters)> = batch
                .par_iter()
                .map(|obs| encoder_grads(&model, obs))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &per_obs {
                batch_loss += loss;
                grads.axpy(scale, g);
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += batch_loss * batch.len() as f64;
            loss_count += batch.len();

            step += 1;
            let warm = if hyperparams.warmup_steps == 0 {
                1.0
            } else {
                (step as f64 / hyperparams.warmup_steps as f64).min(1.0)
            };
            rmsprop_step(
                &mut model.params,
                &grads,
                &mut rms_state,
                hyperparams.learning_rate * warm,
                hyperparams.rms_decay,
                hyperparams.rms_eps,
            );
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }

        let predictions = predict_dataset(&model, &scored_validation)?;
        let validation_metric = evaluate_metric(
            &predictions,
            &scored_validation.labels(),
            scored_validation.num_classes,
            metric,
        )?;
        epochs.push(EpochRecord {
            epoch,
            validation_metric,
            mean_train_loss: loss_sum / loss_count as f64,
        });
        let improved = best
            .as_ref()
            .is_none_or(|(best_metric, _, _)| validation_metric > *best_metric);
        if improved {
            best = Some((validation_metric, epoch, model.params.clone()));
        }
    }

    let (_, selected_epoch, params) = best.expect("at least one epoch ran");
    let checkpoint = ModelCheckpoint {
        config,
        params,
        meta: TrainingMeta {
            epoch: selected_epoch,
            seed,
            strategy: format!("{train_strategy}/{val_strategy}"),
        },
    };
    Ok(TrainReport {
        epochs,
        selected_epoch,
        checkpoint,
        seed,
        train_strategy,
        val_strategy,
    })
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    crate::rng::derive_seed(seed, tag)
}

/// Predicted class per observation, in dataset order.
pub fn predict_dataset<M: TokenClassifier + Sync>(
    model: &M,
    dataset: &Dataset,
) -> Result<Vec<usize>> {
    dataset
        .observations
        .par_iter()
        .map(|obs| model.predict(obs))
        .collect()
}

/// Task metric after masking `round(ratio * |maskable|)` uniformly chosen
/// positions in every observation.
pub fn evaluate<M: TokenClassifier + Sync>(
    model: &M,
    dataset: &Dataset,
    masking_ratio: f64,
    metric: Metric,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&masking_ratio) {
        return Err(Error::Contract("masking ratio must lie in [0, 1]".into()));
    }
    let mask_id = model.mask_token_id();
    let masked: Vec<Observation> = dataset
        .observations
        .iter()
        .map(|obs| {
            let m = obs.maskable.len();
            let count = (masking_ratio * m as f64).round() as usize;
            let positions: Vec<usize> = rand::seq::index::sample(rng, m, count)
                .into_iter()
                .map(|i| obs.maskable[i])
                .collect();
            apply_mask(obs, &positions, mask_id)
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = masked
        .par_iter()
        .map(|obs| model.predict(obs))
        .collect::<Result<_>>()?;
    evaluate_metric(
        &predictions,
        &dataset.labels(),
        dataset.num_classes,
        metric,
    )
}

fn rmsprop_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut Parameters,
    lr: f64,
    decay: f64,
    eps: f64,
) {
    let mut grad_refs: Vec<&Tensor> = Vec::new();
    grads.for_each(|_, t| grad_refs.push(t));

    let mut i = 0;
    state.for_each_mut(|_, v| {
        for (s, &g) in v.as_mut_slice().iter_mut().zip(grad_refs[i].as_slice()) {
            *s = decay * *s + (1.0 - decay) * g * g;
        }
        i += 1;
    });

    let mut state_refs: Vec<&Tensor> = Vec::new();
    state.for_each(|_, t| state_refs.push(t));

    let mut i = 0;
    params.for_each_mut(|_, p| {
        for ((w, &g), &v) in p
            .as_mut_slice()
            .iter_mut()
            .zip(grad_refs[i].as_slice())
            .zip(state_refs[i].as_slice())
        {
            *w -= lr * g / (v.sqrt() + eps);
        }
        i += 1;
    });
}
