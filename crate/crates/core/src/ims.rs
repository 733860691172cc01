//! Token importance measures.
//!
//! Every measure produces either per-position scores or an explicit
//! masking order over an observation's maskable positions. The explained
//! class is always the model's prediction on the exact input handed in,
//! so recursive re-explanation of partially masked inputs stays
//! well-defined.
//!
//! Gradient-based measures differentiate the pre-softmax logit;
//! occlusion-based measures (leave-one-out, beam) compare post-softmax
//! probabilities, which are bounded and comparable across observations.
//!
//! Not every measure exists in both signed and absolute variants: the
//! gradient norm is absolute by construction, and beam search emits an
//! order rather than scores.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_mask, Observation, TokenClassifier};

pub const DEFAULT_BEAM_WIDTH: usize = 10;
pub const DEFAULT_IG_SAMPLES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Signed,
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradNorm {
    L1,
    L2,
}

/// The measure catalogue, including the random baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Measure {
    Grad(GradNorm),
    InputTimesGrad(Variant),
    IntegratedGradients(Variant),
    LeaveOneOut(Variant),
    Beam,
    Random,
}

impl Measure {
    pub const ALL: [Measure; 10] = [
        Measure::Grad(GradNorm::L1),
        Measure::Grad(GradNorm::L2),
        Measure::InputTimesGrad(Variant::Signed),
        Measure::InputTimesGrad(Variant::Absolute),
        Measure::IntegratedGradients(Variant::Signed),
        Measure::IntegratedGradients(Variant::Absolute),
        Measure::LeaveOneOut(Variant::Signed),
        Measure::LeaveOneOut(Variant::Absolute),
        Measure::Beam,
        Measure::Random,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Measure::Grad(GradNorm::L1) => "grad-l1",
            Measure::Grad(GradNorm::L2) => "grad-l2",
            Measure::InputTimesGrad(Variant::Signed) => "xgrad-sign",
            Measure::InputTimesGrad(Variant::Absolute) => "xgrad-abs",
            Measure::IntegratedGradients(Variant::Signed) => "ig-sign",
            Measure::IntegratedGradients(Variant::Absolute) => "ig-abs",
            Measure::LeaveOneOut(Variant::Signed) => "loo-sign",
            Measure::LeaveOneOut(Variant::Absolute) => "loo-abs",
            Measure::Beam => "beam",
            Measure::Random => "random",
        }
    }

    /// Whether the masking curve should recompute this measure after each
    /// masking round. Beam is inherently recursive (recomputing it cannot
    /// change the order) and the random baseline has nothing to recompute.
    pub fn default_recursive(&self) -> bool {
        !matches!(self, Measure::Beam | Measure::Random)
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .iter()
            .find(|m| m.id() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown importance measure '{s}'")))
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl TryFrom<String> for Measure {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Measure> for String {
    fn from(m: Measure) -> String {
        m.id().to_string()
    }
}

/// Per-position importance scores, aligned with the observation's
/// maskable set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    pub variant: Variant,
    pub measure: Measure,
    pub explained_class: usize,
}

impl ImportanceScores {
    fn new(
        obs: &Observation,
        scores: Vec<f64>,
        variant: Variant,
        measure: Measure,
        explained_class: usize,
    ) -> Self {
        debug_assert_eq!(scores.len(), obs.maskable.len());
        ImportanceScores {
            positions: obs.maskable.clone(),
            scores,
            variant,
            measure,
            explained_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderSource {
    Beam,
    DerivedFromScores,
}

/// A masking order: every maskable position exactly once,
/// most-important-first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingOrder {
    pub order: Vec<usize>,
    pub source: OrderSource,
}

/// Gradient norm over the vocabulary dimension (absolute by construction).
pub fn grad_im<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    norm: GradNorm,
) -> Result<ImportanceScores> {
    let target = model.predict(obs)?;
    let bundle = model.input_gradient_at(obs, target, 1.0)?;
    let scores = obs
        .maskable
        .iter()
        .map(|&t| {
            let row = bundle.onehot_grad.row(t);
            match norm {
                GradNorm::L1 => row.iter().map(|v| v.abs()).sum(),
                GradNorm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect();
    Ok(ImportanceScores::new(
        obs,
        scores,
        Variant::Absolute,
        Measure::Grad(norm),
        target,
    ))
}

/// The one-hot input picks its own coordinate out of the gradient.
pub fn input_times_grad<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    variant: Variant,
) -> Result<ImportanceScores> {
    let target = model.predict(obs)?;
    let bundle = model.input_gradient_at(obs, target, 1.0)?;
    let scores = obs
        .maskable
        .iter()
        .map(|&t| {
            let signed = bundle.onehot_grad.get(t, obs.tokens[t] as usize);
            apply_variant(signed, variant)
        })
        .collect();
    Ok(ImportanceScores::new(
        obs,
        scores,
        variant,
        Measure::InputTimesGrad(variant),
        target,
    ))
}

/// Integrated gradients with a zero baseline.
///
/// Right-endpoint Riemann sum over `k` points: token one-hots are scaled
/// by `i/k` while position information stays at full strength.
pub fn integrated_gradient<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    samples: usize,
    variant: Variant,
) -> Result<ImportanceScores> {
    if samples == 0 {
        return Err(Error::Contract("integrated gradients needs k >= 1".into()));
    }
    let target = model.predict(obs)?;
    let mut sums = vec![0.0; obs.maskable.len()];
    for i in 1..=samples {
        let scale = i as f64 / samples as f64;
        let bundle = model.input_gradient_at(obs, target, scale)?;
        for (sum, &t) in sums.iter_mut().zip(&obs.maskable) {
            *sum += bundle.onehot_grad.get(t, obs.tokens[t] as usize);
        }
    }
    let scores = sums
        .iter()
        .map(|&s| apply_variant(s / samples as f64, variant))
        .collect();
    Ok(ImportanceScores::new(
        obs,
        scores,
        variant,
        Measure::IntegratedGradients(variant),
        target,
    ))
}

/// Probability drop when each maskable token is masked on its own.
pub fn leave_one_out<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    variant: Variant,
) -> Result<ImportanceScores> {
    if obs.maskable.is_empty() {
        return Err(Error::Contract(
            "leave-one-out needs at least one maskable position".into(),
        ));
    }
    let target = model.predict(obs)?;
    let base = model.class_probabilities(obs)?[target];
    let mask_id = model.mask_token_id();
    let scores = obs
        .maskable
        .iter()
        .map(|&t| {
            let masked = apply_mask(obs, &[t], mask_id)?;
            let p = model.class_probabilities(&masked)?[target];
            Ok(apply_variant(base - p, variant))
        })
        .collect::<Result<_>>()?;
    Ok(ImportanceScores::new(
        obs,
        scores,
        variant,
        Measure::LeaveOneOut(variant),
        target,
    ))
}

/// Beam search for the masking order that degrades the predicted class
/// fastest.
///
/// A state is a prefix of the masking order; its score is the sum of the
/// predicted-class probabilities after each prefix step, minimized. States
/// reaching the same masked set are deduplicated keeping the better score,
/// and all ties break toward the lexicographically smallest order.
pub fn beam_search_order<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    beam_width: usize,
) -> Result<MaskingOrder> {
    if beam_width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let maskable = &obs.maskable;
    let m = maskable.len();
    if m > 64 {
        return Err(Error::Contract(
            "beam search supports at most 64 maskable positions".into(),
        ));
    }
    let target = model.predict(obs)?;
    let mask_id = model.mask_token_id();

    struct State {
        order: Vec<usize>,
        set: u64,
        score: f64,
    }
    let mut beam = vec![State {
        order: Vec::new(),
        set: 0,
        score: 0.0,
    }];

    for _level in 0..m {
        // Best parent per candidate masked set; probability evaluated once
        // per distinct set.
        let mut candidates: HashMap<u64, (f64, Vec<usize>)> = HashMap::new();
        for state in &beam {
            for (idx, &pos) in maskable.iter().enumerate() {
                if state.set & (1 << idx) != 0 {
                    continue;
                }
                let set = state.set | (1 << idx);
                let mut order = state.order.clone();
                order.push(pos);
                match candidates.get_mut(&set) {
                    Some((best_score, best_order)) => {
                        if state.score < *best_score
                            || (state.score == *best_score && order < *best_order)
                        {
                            *best_score = state.score;
                            *best_order = order;
                        }
                    }
                    None => {
                        candidates.insert(set, (state.score, order));
                    }
                }
            }
        }
        let mut expanded: Vec<State> = candidates
            .into_iter()
            .map(|(set, (parent_score, order))| {
                let positions: Vec<usize> = (0..m)
                    .filter(|i| set & (1 << i) != 0)
                    .map(|i| maskable[i])
                    .collect();
                let masked = apply_mask(obs, &positions, mask_id)?;
                let p = model.class_probabilities(&masked)?[target];
                Ok(State {
                    order,
                    set,
                    score: parent_score + p,
                })
            })
            .collect::<Result<_>>()?;
        expanded.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.order.cmp(&b.order)));
        expanded.truncate(beam_width);
        beam = expanded;
    }

    let best = beam.into_iter().next().expect("beam never empties");
    Ok(MaskingOrder {
        order: best.order,
        source: OrderSource::Beam,
    })
}

/// The known-false baseline: i.i.d. uniform scores.
pub fn random_im(obs: &Observation, rng: &mut ChaCha8Rng) -> ImportanceScores {
    let scores = obs.maskable.iter().map(|_| rng.random::<f64>()).collect();
    ImportanceScores {
        positions: obs.maskable.clone(),
        scores,
        variant: Variant::Absolute,
        measure: Measure::Random,
        explained_class: 0,
    }
}

/// Sort positions by descending score; ties break toward the lower
/// position index. Signed scores rank by signed value, so the most
/// positive contribution masks first.
pub fn order_from_scores(scores: &ImportanceScores) -> MaskingOrder {
    let mut indexed: Vec<(usize, f64)> = scores
        .positions
        .iter()
        .copied()
        .zip(scores.scores.iter().copied())
        .collect();
    indexed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    MaskingOrder {
        order: indexed.into_iter().map(|(pos, _)| pos).collect(),
        source: OrderSource::DerivedFromScores,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MeasureOptions {
    pub beam_width: usize,
    pub ig_samples: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            beam_width: DEFAULT_BEAM_WIDTH,
            ig_samples: DEFAULT_IG_SAMPLES,
        }
    }
}

/// Compute the masking order a measure assigns to an observation.
pub fn masking_order<M: TokenClassifier>(
    model: &M,
    obs: &Observation,
    measure: Measure,
    options: &MeasureOptions,
    rng: &mut ChaCha8Rng,
) -> Result<MaskingOrder> {
    let scores = match measure {
        Measure::Grad(norm) => grad_im(model, obs, norm)?,
        Measure::InputTimesGrad(variant) => input_times_grad(model, obs, variant)?,
        Measure::IntegratedGradients(variant) => {
            integrated_gradient(model, obs, options.ig_samples, variant)?
        }
        Measure::LeaveOneOut(variant) => leave_one_out(model, obs, variant)?,
        Measure::Beam => return beam_search_order(model, obs, options.beam_width),
        Measure::Random => random_im(obs, rng),
    };
    Ok(order_from_scores(&scores))
}

fn apply_variant(value: f64, variant: Variant) -> f64 {
    match variant {
        Variant::Signed => value,
        Variant::Absolute => value.abs(),
    }
}
