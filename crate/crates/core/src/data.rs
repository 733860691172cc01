//! Synthetic classification tasks with known evidence tokens.
//!
//! Each observation's label is fully determined by which class's evidence
//! token it contains; filler tokens carry no class signal and sequence
//! lengths are sampled independently of the class. Masking all evidence
//! therefore reduces any model to the class-majority baseline, which makes
//! these tasks useful probes for erasure metrics.
//!
//! The `RedundantKeyword` task plants `redundancy` copies of the evidence
//! token, so single-token occlusion scores become uninformative unless the
//! explanation is recomputed as tokens get masked.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Observation, TokenId};
use crate::rng::derive_rng;

pub const PAD_TOKEN: TokenId = 0;
pub const CLS_TOKEN: TokenId = 1;
pub const MASK_TOKEN: TokenId = 2;
const NUM_SPECIAL_TOKENS: usize = 3;

const DATASET_SCHEMA: &str = "maskprobe.dataset.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Keyword,
    RedundantKeyword,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Inclusive range of content-token counts (excludes `[CLS]`).
    pub min_content_len: usize,
    pub max_content_len: usize,
    pub num_classes: usize,
    /// Distinct evidence tokens reserved per class.
    pub evidence_per_class: usize,
    /// Copies of the evidence token planted in each observation.
    pub redundancy: usize,
    pub class_priors: Vec<f64>,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.class_priors.len() != self.num_classes {
            return Err(Error::Config("class_priors length must equal num_classes".into()));
        }
        let prior_sum: f64 = self.class_priors.iter().sum();
        if (prior_sum - 1.0).abs() > 1e-9 || self.class_priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("class priors must be positive and sum to 1".into()));
        }
        if self.redundancy < 1 {
            return Err(Error::Config("redundancy must be at least 1".into()));
        }
        if self.evidence_per_class < 1 {
            return Err(Error::Config("evidence_per_class must be at least 1".into()));
        }
        if self.min_content_len < self.redundancy || self.min_content_len > self.max_content_len {
            return Err(Error::Config(
                "content length range must fit the redundancy and be non-empty".into(),
            ));
        }
        let evidence_tokens = self.num_classes * self.evidence_per_class;
        if NUM_SPECIAL_TOKENS + evidence_tokens >= self.vocab_size {
            return Err(Error::Config(format!(
                "vocab of {} cannot hold {} special + {} evidence tokens plus fillers",
                self.vocab_size, NUM_SPECIAL_TOKENS, evidence_tokens
            )));
        }
        if self.train_size == 0 || self.validation_size == 0 || self.test_size == 0 {
            return Err(Error::Config("all split sizes must be positive".into()));
        }
        Ok(())
    }

    /// Evidence tokens assigned to `class`, disjoint across classes.
    pub fn evidence_tokens(&self, class: usize) -> Vec<TokenId> {
        let base = NUM_SPECIAL_TOKENS + class * self.evidence_per_class;
        (base..base + self.evidence_per_class)
            .map(|t| t as TokenId)
            .collect()
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        let first = (NUM_SPECIAL_TOKENS + self.num_classes * self.evidence_per_class) as u32;
        first..self.vocab_size as u32
    }

    /// Evidence positions of an observation, recovered by token scan.
    pub fn evidence_positions(&self, obs: &Observation) -> Vec<usize> {
        let evidence: BTreeSet<TokenId> = (0..self.num_classes)
            .flat_map(|c| self.evidence_tokens(c))
            .collect();
        obs.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| evidence.contains(t))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    pub observations: Vec<Observation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.observations.iter().map(|o| o.label).collect()
    }
}

/// Generate the train/validation/test splits for a task.
///
/// Each split draws from its own seed stream, so splits are disjoint by
/// construction and any split can be regenerated independently.
pub fn generate(config: &TaskConfig) -> Result<(Dataset, Dataset, Dataset)> {
    config.validate()?;
    let make = |split: Split, size: usize, tag: &str| -> Dataset {
        let mut rng = derive_rng(config.seed, tag);
        let observations = (0..size)
            .map(|_| generate_observation(config, &mut rng))
            .collect();
        Dataset {
            split,
            num_classes: config.num_classes,
            observations,
        }
    };
    Ok((
        make(Split::Train, config.train_size, "data/train"),
        make(Split::Validation, config.validation_size, "data/validation"),
        make(Split::Test, config.test_size, "data/test"),
    ))
}

fn generate_observation(config: &TaskConfig, rng: &mut ChaCha8Rng) -> Observation {
    let label = sample_class(&config.class_priors, rng);
    let content_len = rng.random_range(config.min_content_len..=config.max_content_len);

    let filler = config.filler_range();
    let mut tokens: Vec<TokenId> = vec![CLS_TOKEN];
    tokens.extend((0..content_len).map(|_| rng.random_range(filler.clone())));

    let evidence_pool = config.evidence_tokens(label);
    let evidence = evidence_pool[rng.random_range(0..evidence_pool.len())];
    let copies = match config.kind {
        TaskKind::Keyword => 1,
        TaskKind::RedundantKeyword => config.redundancy,
    };
    let slots = rand::seq::index::sample(rng, content_len, copies);
    for slot in slots {
        tokens[1 + slot] = evidence;
    }

    let length = tokens.len();
    Observation {
        tokens,
        label,
        maskable: (1..length).collect(),
        length,
    }
}

fn sample_class(priors: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    for (class, &p) in priors.iter().enumerate() {
        acc += p;
        if draw < acc {
            return class;
        }
    }
    priors.len() - 1
}

/// Performance of the constant most-frequent-class predictor.
///
/// Majority ties break toward the lowest class index.
pub fn class_majority(dataset: &Dataset, metric: Metric) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("class_majority dataset"));
    }
    let mut counts = vec![0usize; dataset.num_classes];
    for obs in &dataset.observations {
        counts[obs.label] += 1;
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap();
    let labels = dataset.labels();
    let predictions = vec![majority; labels.len()];
    evaluate_metric(&predictions, &labels, dataset.num_classes, metric)
}

/// Accuracy or macro-F1 of `predictions` against `labels`.
///
/// Classes absent from both predictions and labels contribute an F1 of 0.
pub fn evaluate_metric(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    metric: Metric,
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("evaluate_metric inputs"));
    }
    match metric {
        Metric::Accuracy => {
            let correct = predictions
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
        Metric::MacroF1 => {
            let mut f1_sum = 0.0;
            for class in 0..num_classes {
                let tp = predictions
                    .iter()
                    .zip(labels)
                    .filter(|(&p, &l)| p == class && l == class)
                    .count() as f64;
                let pred_count = predictions.iter().filter(|&&p| p == class).count() as f64;
                let label_count = labels.iter().filter(|&&l| l == class).count() as f64;
                let f1 = if pred_count + label_count == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (pred_count + label_count)
                };
                f1_sum += f1;
            }
            Ok(f1_sum / num_classes as f64)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFileHeader {
    schema: String,
    task: TaskConfig,
}

#[derive(Serialize, Deserialize)]
struct DatasetFileRecord {
    split: Split,
    tokens: Vec<TokenId>,
    label: usize,
    maskable: Vec<usize>,
    length: usize,
}

/// Write all three splits as one header line plus one record per line.
pub fn write_dataset_file(
    path: &Path,
    config: &TaskConfig,
    splits: &[&Dataset],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header = DatasetFileHeader {
        schema: DATASET_SCHEMA.into(),
        task: config.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for dataset in splits {
        for obs in &dataset.observations {
            let record = DatasetFileRecord {
                split: dataset.split,
                tokens: obs.tokens.clone(),
                label: obs.label,
                maskable: obs.maskable.clone(),
                length: obs.length,
            };
            serde_json::to_writer(&mut w, &record).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset file back into its task config and splits.
pub fn read_dataset_file(path: &Path) -> Result<(TaskConfig, Dataset, Dataset, Dataset)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetFileHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported dataset schema '{}'",
            header.schema
        )));
    }
    let config = header.task;
    config.validate()?;
    let mut splits = [Vec::new(), Vec::new(), Vec::new()];
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: DatasetFileRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("record: {e}")))?;
        let obs = Observation {
            tokens: record.tokens,
            label: record.label,
            maskable: record.maskable,
            length: record.length,
        };
        let idx = match record.split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        };
        splits[idx].push(obs);
    }
    let [train, validation, test] = splits;
    let num_classes = config.num_classes;
    let mk = |split, observations| Dataset {
        split,
        num_classes,
        observations,
    };
    Ok((
        config,
        mk(Split::Train, train),
        mk(Split::Validation, validation),
        mk(Split::Test, test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn keyword_config() -> TaskConfig {
        TaskConfig {
            kind: TaskKind::Keyword,
            vocab_size: 32,
            min_content_len: 4,
            max_content_len: 10,
            num_classes: 2,
            evidence_per_class: 1,
            redundancy: 1,
            class_priors: vec![0.7, 0.3],
            train_size: 64,
            validation_size: 32,
            test_size: 32,
            metric: Metric::Accuracy,
            seed: 11,
        }
    }

    #[test]
    fn keyword_observation_has_exactly_one_evidence_token() {
        let config = keyword_config();
        let (train, _, _) = generate(&config).unwrap();
        for obs in &train.observations {
            let positions = config.evidence_positions(obs);
            assert_eq!(positions.len(), 1, "tokens: {:?}", obs.tokens);
            let own: Vec<TokenId> = config.evidence_tokens(obs.label);
            assert!(own.contains(&obs.tokens[positions[0]]));
        }
    }

    #[test]
    fn redundant_observation_has_exactly_r_copies() {
        let mut config = keyword_config();
        config.kind = TaskKind::RedundantKeyword;
        config.redundancy = 3;
        let (train, _, _) = generate(&config).unwrap();
        for obs in &train.observations {
            let positions = config.evidence_positions(obs);
            assert_eq!(positions.len(), 3);
            let token = obs.tokens[positions[0]];
            assert!(positions.iter().all(|&p| obs.tokens[p] == token));
        }
    }

    #[test]
    fn observations_validate_against_a_matching_model_config() {
        let config = keyword_config();
        let model_config = crate::model::ModelConfig {
            vocab_size: config.vocab_size,
            max_seq_len: config.max_content_len + 1,
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            num_classes: config.num_classes,
            mask_token_id: MASK_TOKEN,
            pad_token_id: PAD_TOKEN,
            cls_token_id: CLS_TOKEN,
            seed: 0,
        };
        let (train, validation, test) = generate(&config).unwrap();
        for ds in [&train, &validation, &test] {
            for obs in &ds.observations {
                obs.validate(&model_config).unwrap();
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let config = keyword_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_and_length_are_nearly_uncorrelated() {
        let mut config = keyword_config();
        config.train_size = 10_000;
        let (train, _, _) = generate(&config).unwrap();
        let labels: Vec<f64> = train.observations.iter().map(|o| o.label as f64).collect();
        let lengths: Vec<f64> = train.observations.iter().map(|o| o.length as f64).collect();
        let rho = crate::stats::correlation(&labels, &lengths);
        assert!(rho.abs() < 0.05, "point-biserial correlation {rho}");
    }

    #[test]
    fn class_majority_balanced_accuracy_is_half() {
        let mut config = keyword_config();
        config.class_priors = vec![0.5, 0.5];
        config.train_size = 4;
        let mut ds = generate(&config).unwrap().0;
        // Force exact balance to make the value exact.
        for (i, obs) in ds.observations.iter_mut().enumerate() {
            obs.label = i % 2;
        }
        assert_eq!(class_majority(&ds, Metric::Accuracy).unwrap(), 0.5);
    }

    #[test]
    fn class_majority_matches_empirical_prior() {
        let mut config = keyword_config();
        config.train_size = 10;
        let mut ds = generate(&config).unwrap().0;
        for (i, obs) in ds.observations.iter_mut().enumerate() {
            obs.label = usize::from(i >= 7);
        }
        assert_eq!(class_majority(&ds, Metric::Accuracy).unwrap(), 0.7);
    }

    #[test]
    fn class_majority_macro_f1_from_constant_predictor_confusion() {
        // 7 of class 0, 3 of class 1; the constant class-0 predictor has
        // class-0 precision 0.7 and recall 1, class-1 F1 0.
        let mut config = keyword_config();
        config.train_size = 10;
        let mut ds = generate(&config).unwrap().0;
        for (i, obs) in ds.observations.iter_mut().enumerate() {
            obs.label = usize::from(i >= 7);
        }
        let expected = (2.0 * 0.7 / 1.7) / 2.0;
        let got = class_majority(&ds, Metric::MacroF1).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn metric_all_correct_is_one() {
        let labels = vec![0, 1, 2, 1];
        assert_eq!(
            evaluate_metric(&labels, &labels, 3, Metric::Accuracy).unwrap(),
            1.0
        );
        assert_eq!(
            evaluate_metric(&labels, &labels, 3, Metric::MacroF1).unwrap(),
            1.0
        );
    }

    #[test]
    fn metric_binary_complement_is_zero_accuracy() {
        let labels = vec![0, 1, 0, 1];
        let predictions: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
        assert_eq!(
            evaluate_metric(&predictions, &labels, 2, Metric::Accuracy).unwrap(),
            0.0
        );
    }

    #[test]
    fn macro_f1_three_class_fixture() {
        // Confusion (rows = label, cols = prediction):
        //   [2 1 0]
        //   [0 1 1]
        //   [1 0 2]
        let labels = vec![0, 0, 0, 1, 1, 2, 2, 2];
        let predictions = vec![0, 0, 1, 1, 2, 0, 2, 2];
        // class 0: tp=2, pred=3, label=3 -> f1 = 4/6
        // class 1: tp=1, pred=2, label=2 -> f1 = 2/4
        // class 2: tp=2, pred=3, label=3 -> f1 = 4/6
        let expected = (4.0 / 6.0 + 0.5 + 4.0 / 6.0) / 3.0;
        let got = evaluate_metric(&predictions, &labels, 3, Metric::MacroF1).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn metric_length_mismatch_is_rejected() {
        assert!(evaluate_metric(&[0], &[0, 1], 2, Metric::Accuracy).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let config = keyword_config();
        let (train, validation, test) = generate(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset_file(&path, &config, &[&train, &validation, &test]).unwrap();
        let (config2, train2, validation2, test2) = read_dataset_file(&path).unwrap();
        assert_eq!(config2, config);
        assert_eq!(train2, train);
        assert_eq!(validation2, validation);
        assert_eq!(test2, test);
    }

    #[test]
    fn serialized_form_is_reproducible() {
        let config = keyword_config();
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for name in ["a.jsonl", "b.jsonl"] {
            let (train, validation, test) = generate(&config).unwrap();
            let path = dir.path().join(name);
            write_dataset_file(&path, &config, &[&train, &validation, &test]).unwrap();
            bytes.push(std::fs::read(path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let mut config = keyword_config();
        config.vocab_size = 5;
        assert!(matches!(generate(&config), Err(Error::Config(_))));
    }
}
