//! Max-Simes-Fisher (MaSF) nonparametric in-distribution testing.
//!
//! Calibration runs the model over a masked copy of the validation set and
//! collects, for every (layer, hidden-dim) pair, the maximum signed
//! activation across the sequence. Those samples define empirical CDFs.
//! A test observation is scored in three stages:
//!
//! 1. per (layer, dim): two-sided p-value of its max statistic,
//! 2. per layer: Simes aggregation across dims, recalibrated against the
//!    lower tail of the calibration Simes values,
//! 3. per observation: Fisher statistic across layers, recalibrated
//!    against the upper tail of the calibration Fisher statistics.
//!
//! Every CDF conversion clamps to `[1/(n+1), 1]`, which keeps Fisher's
//! logarithm finite and preserves ordering. A whole dataset aggregates to
//! one p-value with another Simes pass. In-distribution is the null
//! hypothesis: small p-values signal out-of-distribution inputs.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Block};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTrace, ModelCheckpoint};
use crate::train::{build_validation, ValStrategy};

pub const DEFAULT_CALIBRATION_FLOOR: usize = 100;

/// Sorted sample table with strictly-less lookup semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("empirical CDF samples"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "empirical CDF samples",
                layer: None,
            });
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Ok(EmpiricalCdf { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples strictly below `z`.
    pub fn lookup(&self, z: f64) -> f64 {
        let below = self.sorted.partition_point(|&x| x < z);
        below as f64 / self.sorted.len() as f64
    }

    fn clamp(&self, p: f64) -> f64 {
        p.max(1.0 / (self.sorted.len() + 1) as f64)
    }

    /// Lower-tail p-value: small values are extreme.
    pub fn lower_tail_pvalue(&self, z: f64) -> f64 {
        self.clamp(self.lookup(z))
    }

    /// Upper-tail p-value: large values are extreme.
    pub fn upper_tail_pvalue(&self, z: f64) -> f64 {
        self.clamp(1.0 - self.lookup(z))
    }
}

/// Two-sided p-value `min(F(z), 1 - F(z))`, clamped to `[1/(n+1), 1]`.
pub fn two_sided_pvalue(cdf: &EmpiricalCdf, z: f64) -> f64 {
    let f = cdf.lookup(z);
    cdf.clamp(f.min(1.0 - f))
}

/// Simes combination: `min(1, min_i n * p_(i) / i)` over sorted p-values.
pub fn simes(pvalues: &[f64]) -> Result<f64> {
    check_pvalues(pvalues)?;
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let combined = sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| n * p / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(combined.min(1.0))
}

/// Fisher combination statistic `-2 * sum(ln p)`; larger is more extreme.
pub fn fisher_statistic(pvalues: &[f64]) -> Result<f64> {
    check_pvalues(pvalues)?;
    Ok(-2.0 * pvalues.iter().map(|p| p.ln()).sum::<f64>())
}

fn check_pvalues(pvalues: &[f64]) -> Result<()> {
    if pvalues.is_empty() {
        return Err(Error::Empty("p-values"));
    }
    if pvalues.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Contract("p-values must lie in (0, 1]".into()));
    }
    Ok(())
}

/// One dataset-level p-value from per-observation p-values.
pub fn dataset_pvalue(pvalues: &[f64]) -> Result<f64> {
    simes(pvalues)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProvenance {
    pub dataset_id: String,
    pub masking_seed: u64,
    pub strategy: String,
}

/// Fitted CDF tables: `L x H` at stage 1, `L` at stage 2, one at stage 3.
#[derive(Clone, Debug, PartialEq)]
pub struct MasfCalibration {
    stage1: Vec<Vec<EmpiricalCdf>>,
    stage2: Vec<EmpiricalCdf>,
    stage3: EmpiricalCdf,
    pub provenance: CalibrationProvenance,
}

impl MasfCalibration {
    pub fn num_layers(&self) -> usize {
        self.stage1.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.stage1.first().map_or(0, Vec::len)
    }

    pub fn stage1_cdf(&self, layer: usize, dim: usize) -> &EmpiricalCdf {
        &self.stage1[layer][dim]
    }

    pub fn stage2_cdf(&self, layer: usize) -> &EmpiricalCdf {
        &self.stage2[layer]
    }

    pub fn stage3_cdf(&self) -> &EmpiricalCdf {
        &self.stage3
    }
}

/// Max over valid sequence positions, per layer and hidden dim.
fn sequence_max_statistics(trace: &EmbeddingTrace) -> Vec<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            (0..layer.cols())
                .map(|h| {
                    (0..trace.valid_len)
                        .map(|t| layer.get(t, h))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect()
}

/// Fit MaSF CDF tables from a validation dataset.
///
/// The dataset is first transformed with the same validation-masking
/// strategy used during fine-tuning, so the calibration covers the
/// masking patterns the model was selected under.
pub fn masf_fit(
    model: &ModelCheckpoint,
    validation: &Dataset,
    strategy: ValStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<MasfCalibration> {
    masf_fit_with_floor(model, validation, strategy, rng, DEFAULT_CALIBRATION_FLOOR)
}

pub fn masf_fit_with_floor(
    model: &ModelCheckpoint,
    validation: &Dataset,
    strategy: ValStrategy,
    rng: &mut ChaCha8Rng,
    floor: usize,
) -> Result<MasfCalibration> {
    let masking_seed = {
        use rand::RngCore;
        rng.next_u64()
    };
    let mut mask_rng = crate::rng::derive_rng(masking_seed, "masf/calibration-mask");
    let transformed =
        build_validation(validation, strategy, model.config.mask_token_id, &mut mask_rng);
    if transformed.len() < floor {
        return Err(Error::CalibrationTooSmall {
            got: transformed.len(),
            min: floor,
        });
    }

    let traces: Vec<EmbeddingTrace> = transformed
        .observations
        .par_iter()
        .map(|obs| Ok(model.forward(obs, true)?.1.expect("trace requested")))
        .collect::<Result<_>>()?;
    let stats: Vec<Vec<Vec<f64>>> = traces.iter().map(sequence_max_statistics).collect();

    let num_layers = model.config.num_layers;
    let hidden = model.config.hidden_dim;

    let stage1: Vec<Vec<EmpiricalCdf>> = (0..num_layers)
        .map(|l| {
            (0..hidden)
                .map(|h| {
                    let samples: Vec<f64> = stats.iter().map(|s| s[l][h]).collect();
                    EmpiricalCdf::new(&samples)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    // Simes values of the calibration set itself, per layer.
    let simes_values: Vec<Vec<f64>> = stats
        .iter()
        .map(|s| {
            (0..num_layers)
                .map(|l| {
                    let ps: Vec<f64> = (0..hidden)
                        .map(|h| two_sided_pvalue(&stage1[l][h], s[l][h]))
                        .collect();
                    simes(&ps)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let stage2: Vec<EmpiricalCdf> = (0..num_layers)
        .map(|l| {
            let samples: Vec<f64> = simes_values.iter().map(|s| s[l]).collect();
            EmpiricalCdf::new(&samples)
        })
        .collect::<Result<_>>()?;

    let fisher_values: Vec<f64> = simes_values
        .iter()
        .map(|per_layer| {
            let ps: Vec<f64> = per_layer
                .iter()
                .enumerate()
                .map(|(l, &s)| stage2[l].lower_tail_pvalue(s))
                .collect();
            fisher_statistic(&ps)
        })
        .collect::<Result<_>>()?;

    let stage3 = EmpiricalCdf::new(&fisher_values)?;

    Ok(MasfCalibration {
        stage1,
        stage2,
        stage3,
        provenance: CalibrationProvenance {
            dataset_id: format!("{:?}/{}", validation.split, validation.len()),
            masking_seed,
            strategy: strategy.to_string(),
        },
    })
}

/// In-distribution p-value of one trace against a calibration.
pub fn masf_pvalue(calibration: &MasfCalibration, trace: &EmbeddingTrace) -> Result<f64> {
    if trace.num_layers() != calibration.num_layers()
        || trace.hidden_dim() != calibration.hidden_dim()
    {
        return Err(Error::ShapeMismatch(format!(
            "trace is {}x{} but calibration is {}x{}",
            trace.num_layers(),
            trace.hidden_dim(),
            calibration.num_layers(),
            calibration.hidden_dim()
        )));
    }
    let stats = sequence_max_statistics(trace);
    let layer_ps: Vec<f64> = (0..calibration.num_layers())
        .map(|l| {
            let ps: Vec<f64> = (0..calibration.hidden_dim())
                .map(|h| two_sided_pvalue(&calibration.stage1[l][h], stats[l][h]))
                .collect();
            let s = simes(&ps)?;
            Ok(calibration.stage2[l].lower_tail_pvalue(s))
        })
        .collect::<Result<_>>()?;
    let fisher = fisher_statistic(&layer_ps)?;
    Ok(calibration.stage3.upper_tail_pvalue(fisher))
}

/// Score every observation of a dataset, in order.
pub fn masf_pvalues_for_dataset(
    model: &ModelCheckpoint,
    calibration: &MasfCalibration,
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    dataset
        .observations
        .par_iter()
        .map(|obs| {
            let trace = model.forward(obs, true)?.1.expect("trace requested");
            masf_pvalue(calibration, &trace)
        })
        .collect()
}

const CALIBRATION_KIND: &str = "masf-calibration";

pub fn write_calibration(path: &Path, calibration: &MasfCalibration) -> Result<()> {
    let header = serde_json::json!({
        "schema_version": 1,
        "num_layers": calibration.num_layers(),
        "hidden_dim": calibration.hidden_dim(),
        "provenance": calibration.provenance,
    });
    let mut blocks = Vec::new();
    for (l, row) in calibration.stage1.iter().enumerate() {
        for (h, cdf) in row.iter().enumerate() {
            blocks.push(Block {
                name: format!("stage1/{l}/{h}"),
                rows: 1,
                cols: cdf.len(),
                data: cdf.samples().to_vec(),
            });
        }
    }
    for (l, cdf) in calibration.stage2.iter().enumerate() {
        blocks.push(Block {
            name: format!("stage2/{l}"),
            rows: 1,
            cols: cdf.len(),
            data: cdf.samples().to_vec(),
        });
    }
    blocks.push(Block {
        name: "stage3".into(),
        rows: 1,
        cols: calibration.stage3.len(),
        data: calibration.stage3.samples().to_vec(),
    });
    container::write(path, CALIBRATION_KIND, &header, &blocks)
}

pub fn read_calibration(path: &Path) -> Result<MasfCalibration> {
    let (header, blocks) = container::read(path, CALIBRATION_KIND)?;
    let num_layers = header["num_layers"]
        .as_u64()
        .ok_or_else(|| Error::Format("calibration header missing num_layers".into()))?
        as usize;
    let hidden_dim = header["hidden_dim"]
        .as_u64()
        .ok_or_else(|| Error::Format("calibration header missing hidden_dim".into()))?
        as usize;
    let provenance: CalibrationProvenance =
        serde_json::from_value(header["provenance"].clone())
            .map_err(|e| Error::Format(format!("calibration provenance: {e}")))?;

    let mut by_name: std::collections::BTreeMap<String, Block> =
        blocks.into_iter().map(|b| (b.name.clone(), b)).collect();
    let mut take = |name: String| -> Result<EmpiricalCdf> {
        let block = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("calibration missing table {name}")))?;
        // Tables were sorted when fitted; sorting again is a no-op on
        // well-formed files and repairs nothing worse than ordering.
        EmpiricalCdf::new(&block.data)
    };

    let stage1 = (0..num_layers)
        .map(|l| {
            (0..hidden_dim)
                .map(|h| take(format!("stage1/{l}/{h}")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let stage2 = (0..num_layers)
        .map(|l| take(format!("stage2/{l}")))
        .collect::<Result<Vec<_>>>()?;
    let stage3 = take("stage3".into())?;
    if !by_name.is_empty() {
        return Err(Error::Format(format!(
            "calibration has unknown tables: {}",
            by_name.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(MasfCalibration {
        stage1,
        stage2,
        stage3,
        provenance,
    })
}
