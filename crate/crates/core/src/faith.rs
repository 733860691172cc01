//! Erasure-based faithfulness measurement.
//!
//! A masking curve records task performance while an importance measure's
//! most important tokens are masked in cumulative 10% steps. In recursive
//! mode the explanation is recomputed on the masked input after every
//! step, which is what keeps dataset redundancies from hiding importance.
//! Each step also records the MaSF dataset p-value; steps below the OOD
//! significance level flag the curve rather than abort it, so ablation
//! runs on plainly fine-tuned models still produce comparable curves.
//!
//! ACU is the trapezoid area between the random-baseline curve and the
//! measure's curve; RACU divides by the area between the baseline and its
//! own final value, i.e. by the area a theoretically optimal explanation
//! (performance of full masking at every step) would attain. Values above
//! 1 are legal for signed measures, which can steer the model toward the
//! opposite label. Per-seed scores aggregate with bias-corrected and
//! accelerated (BCa) bootstrap intervals over the mean.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{evaluate_metric, Dataset, Metric};
use crate::error::{Error, Result};
use crate::ims::{masking_order, Measure, MeasureOptions};
use crate::masf::{dataset_pvalue, masf_pvalue, MasfCalibration};
use crate::model::{apply_mask, ModelCheckpoint, Observation, TokenClassifier};
use crate::rng::derive_rng;

pub const DEFAULT_RATIO_STEPS: usize = 10;
pub const DEFAULT_OOD_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
pub struct CurveOptions {
    /// Number of masking increments; the grid has `steps + 1` points.
    pub steps: usize,
    /// Significance level of the per-ratio OOD gate.
    pub alpha: f64,
    pub measure_options: MeasureOptions,
    /// Independent order draws averaged into the random baseline curve.
    /// A single draw is a high-variance reference; other measures ignore
    /// this.
    pub random_replicates: usize,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            steps: DEFAULT_RATIO_STEPS,
            alpha: DEFAULT_OOD_ALPHA,
            measure_options: MeasureOptions::default(),
            random_replicates: 4,
        }
    }
}

/// Task performance and MaSF p-values along the masking-ratio grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingCurve {
    pub measure: Measure,
    pub recursive: bool,
    pub seed: u64,
    pub alpha: f64,
    pub ratios: Vec<f64>,
    pub performance: Vec<f64>,
    pub masf_pvalues: Vec<f64>,
    /// Grid indices whose dataset p-value fell below `alpha`.
    pub flagged_ratios: Vec<usize>,
}

impl MaskingCurve {
    pub fn is_flagged(&self) -> bool {
        !self.flagged_ratios.is_empty()
    }
}

/// Trace one measure's masking curve over a test dataset.
///
/// Per observation, the cumulative masked count at grid point `i` is
/// `round(ratio_i * |maskable|)`, so the final step always reaches 100%.
/// The masked set only ever grows; with `recursive` the next positions
/// come from a fresh explanation of the current masked input, otherwise
/// the initial order is consumed.
pub fn masking_curve(
    model: &ModelCheckpoint,
    test_set: &Dataset,
    measure: Measure,
    recursive: bool,
    calibration: &MasfCalibration,
    metric: Metric,
    options: &CurveOptions,
    seed: u64,
) -> Result<MaskingCurve> {
    if options.steps == 0 {
        return Err(Error::Contract("curve needs at least one step".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Empty("masking curve dataset"));
    }
    let steps = options.steps;
    let ratios: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let replicates = if measure == Measure::Random {
        options.random_replicates.max(1)
    } else {
        1
    };

    // predictions[replicate][ratio] per observation; p-values come from
    // the first replicate.
    let per_obs: Vec<(Vec<Vec<usize>>, Vec<f64>)> = test_set
        .observations
        .par_iter()
        .enumerate()
        .map(|(index, obs)| {
            let mut replicate_preds = Vec::with_capacity(replicates);
            let mut first_pvalues = Vec::new();
            for replicate in 0..replicates {
                let mut rng = derive_rng(
                    seed,
                    &format!("curve/{}/{}/{}", measure.id(), index, replicate),
                );
                let (preds, ps) = trace_observation(
                    model,
                    obs,
                    measure,
                    recursive,
                    calibration,
                    &ratios,
                    &options.measure_options,
                    replicate == 0,
                    &mut rng,
                )?;
                replicate_preds.push(preds);
                if replicate == 0 {
                    first_pvalues = ps;
                }
            }
            Ok((replicate_preds, first_pvalues))
        })
        .collect::<Result<_>>()?;

    let labels = test_set.labels();
    let mut performance = Vec::with_capacity(ratios.len());
    let mut masf_pvalues = Vec::with_capacity(ratios.len());
    let mut flagged_ratios = Vec::new();
    for i in 0..ratios.len() {
        let mut replicate_sum = 0.0;
        for replicate in 0..replicates {
            let predictions: Vec<usize> = per_obs
                .iter()
                .map(|(preds, _)| preds[replicate][i])
                .collect();
            replicate_sum += evaluate_metric(
                &predictions,
                &labels,
                test_set.num_classes,
                metric,
            )?;
        }
        performance.push(replicate_sum / replicates as f64);
        let pvalues: Vec<f64> = per_obs.iter().map(|(_, ps)| ps[i]).collect();
        let p = dataset_pvalue(&pvalues)?;
        if p < options.alpha {
            flagged_ratios.push(i);
        }
        masf_pvalues.push(p);
    }

    Ok(MaskingCurve {
        measure,
        recursive,
        seed,
        alpha: options.alpha,
        ratios,
        performance,
        masf_pvalues,
        flagged_ratios,
    })
}

#[allow(clippy::too_many_arguments)]
fn trace_observation(
    model: &ModelCheckpoint,
    obs: &Observation,
    measure: Measure,
    recursive: bool,
    calibration: &MasfCalibration,
    ratios: &[f64],
    measure_options: &MeasureOptions,
    want_pvalues: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let m = obs.maskable.len();
    let mask_id = model.config.mask_token_id;
    let initial_order = if recursive {
        None
    } else {
        Some(masking_order(model, obs, measure, measure_options, rng)?.order)
    };

    let mut current = obs.clone();
    let mut masked: Vec<usize> = Vec::with_capacity(m);
    let mut predictions = Vec::with_capacity(ratios.len());
    let mut pvalues = Vec::with_capacity(ratios.len());

    for &ratio in ratios {
        let want = (ratio * m as f64).round() as usize;
        let need = want.saturating_sub(masked.len());
        if need > 0 {
            let next: Vec<usize> = match &initial_order {
                Some(order) => order
                    .iter()
                    .copied()
                    .filter(|p| !masked.contains(p))
                    .take(need)
                    .collect(),
                None => {
                    let order = masking_order(model, &current, measure, measure_options, rng)?;
                    order
                        .order
                        .into_iter()
                        .filter(|p| !masked.contains(p))
                        .take(need)
                        .collect()
                }
            };
            current = apply_mask(&current, &next, mask_id)?;
            masked.extend(next);
        }
        if want_pvalues {
            let (probs, trace) = model.forward(&current, true)?;
            predictions.push(crate::model::argmax(&probs));
            pvalues.push(masf_pvalue(calibration, &trace.expect("trace requested"))?);
        } else {
            let probs = model.class_probabilities(&current)?;
            predictions.push(crate::model::argmax(&probs));
        }
    }
    Ok((predictions, pvalues))
}

fn check_grids(a: &MaskingCurve, b: &MaskingCurve) -> Result<()> {
    if a.ratios != b.ratios {
        return Err(Error::GridMismatch);
    }
    if a.ratios.len() < 2 {
        return Err(Error::Contract("curves need at least two grid points".into()));
    }
    Ok(())
}

/// Trapezoid area between the baseline and the measure's curve.
///
/// With the performance delta `b_i - p_i`, the area is positive when the
/// measure degrades performance faster than random masking.
pub fn acu(curve: &MaskingCurve, baseline: &MaskingCurve) -> Result<f64> {
    check_grids(curve, baseline)?;
    let delta: Vec<f64> = baseline
        .performance
        .iter()
        .zip(&curve.performance)
        .map(|(b, p)| b - p)
        .collect();
    Ok(trapezoid(&curve.ratios, &delta))
}

/// ACU normalized by the baseline's own area above its final value.
pub fn racu(curve: &MaskingCurve, baseline: &MaskingCurve) -> Result<f64> {
    check_grids(curve, baseline)?;
    let area = acu(curve, baseline)?;
    let final_value = *baseline.performance.last().expect("non-empty grid");
    let delta: Vec<f64> = baseline
        .performance
        .iter()
        .map(|b| b - final_value)
        .collect();
    let normalizer = trapezoid(&baseline.ratios, &delta);
    if normalizer.abs() <= 1e-9 {
        return Err(Error::UndefinedNormalizer(normalizer));
    }
    Ok(area / normalizer)
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 0..xs.len() - 1 {
        area += 0.5 * (xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]);
    }
    area
}

/// BCa bootstrap interval for the mean of `values`.
///
/// Bias correction comes from the share of bootstrap means below the
/// observed mean; acceleration from jackknife skewness. Identical values
/// yield the degenerate interval at that value.
pub fn bca_interval(
    values: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Contract(
            "bootstrap interval needs at least two values".into(),
        ));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::Contract("confidence level must lie in (0, 1)".into()));
    }
    if resamples == 0 {
        return Err(Error::Contract("need at least one resample".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], values[0]));
    }
    let n = values.len();
    let observed = crate::stats::mean(values);

    let mut boot_means: Vec<f64> = (0..resamples)
        .map(|_| {
            let sum: f64 = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    boot_means.sort_by(|a, b| a.total_cmp(b));

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Small samples put a sizable atom exactly at the observed mean; ties
    // split evenly so the correction stays centered.
    let below = boot_means.iter().filter(|&&m| m < observed).count();
    let equal = boot_means.iter().filter(|&&m| m == observed).count();
    let fraction = ((below as f64 + 0.5 * equal as f64) / resamples as f64)
        .clamp(1.0 / (resamples as f64 + 1.0), 1.0 - 1.0 / (resamples as f64 + 1.0));
    let z0 = normal.inverse_cdf(fraction);

    // Jackknife acceleration.
    let total: f64 = values.iter().sum();
    let jack: Vec<f64> = values
        .iter()
        .map(|&v| (total - v) / (n as f64 - 1.0))
        .collect();
    let jack_mean = crate::stats::mean(&jack);
    let d2: f64 = jack.iter().map(|&j| (jack_mean - j).powi(2)).sum();
    let d3: f64 = jack.iter().map(|&j| (jack_mean - j).powi(3)).sum();
    let acceleration = if d2 == 0.0 {
        0.0
    } else {
        d3 / (6.0 * d2.powf(1.5))
    };

    let alpha = 1.0 - level;
    let adjusted = |z_alpha: f64| -> f64 {
        let num = z0 + z_alpha;
        normal.cdf(z0 + num / (1.0 - acceleration * num))
    };
    let q_lo = adjusted(normal.inverse_cdf(alpha / 2.0));
    let q_hi = adjusted(normal.inverse_cdf(1.0 - alpha / 2.0));

    let pick = |q: f64| -> f64 {
        let idx = ((q * resamples as f64).floor() as usize).min(resamples - 1);
        boot_means[idx]
    };
    let (lo, hi) = (pick(q_lo), pick(q_hi));
    Ok((lo.min(hi), lo.max(hi)))
}

/// Arithmetic mean across per-task values; non-converged runs are expected
/// to be excluded upstream.
pub fn mean_across_tasks(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("per-task values"));
    }
    Ok(crate::stats::mean(values))
}

/// Per-measure faithfulness summary across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub measure: Measure,
    pub acu_per_seed: Vec<f64>,
    pub racu_per_seed: Vec<f64>,
    pub acu_mean: f64,
    pub racu_mean: f64,
    pub acu_interval: (f64, f64),
    pub racu_interval: (f64, f64),
    /// True if any contributing curve failed the OOD gate.
    pub ood_flagged: bool,
}

pub fn summarize_faithfulness(
    measure: Measure,
    pairs: &[(MaskingCurve, MaskingCurve)],
    level: f64,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FaithfulnessReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("faithfulness curves"));
    }
    let mut acu_per_seed = Vec::with_capacity(pairs.len());
    let mut racu_per_seed = Vec::with_capacity(pairs.len());
    let mut ood_flagged = false;
    for (curve, baseline) in pairs {
        acu_per_seed.push(acu(curve, baseline)?);
        racu_per_seed.push(racu(curve, baseline)?);
        ood_flagged |= curve.is_flagged();
    }
    let (acu_interval, racu_interval) = if pairs.len() < 2 {
        (
            (acu_per_seed[0], acu_per_seed[0]),
            (racu_per_seed[0], racu_per_seed[0]),
        )
    } else {
        (
            bca_interval(&acu_per_seed, level, resamples, rng)?,
            bca_interval(&racu_per_seed, level, resamples, rng)?,
        )
    };
    Ok(FaithfulnessReport {
        measure,
        acu_mean: crate::stats::mean(&acu_per_seed),
        racu_mean: crate::stats::mean(&racu_per_seed),
        acu_per_seed,
        racu_per_seed,
        acu_interval,
        racu_interval,
        ood_flagged,
    })
}
