//! The masked-token classifier: configuration, parameters, observations,
//! forward traces, and input gradients.
//!
//! The architecture is a small post-layer-norm transformer encoder with a
//! linear head on the leading `[CLS]` position. Each encoder layer ends in
//! a layer normalization whose output is captured as that layer's trace
//! row, so a trace always holds exactly `num_layers x seq_len x hidden_dim`
//! activations. Checkpoints are immutable once trained; forward and
//! gradient calls borrow them and are safe to run from many threads.

mod encoder;
mod io;

pub use io::{read_checkpoint, write_checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub mask_token_id: TokenId,
    pub pad_token_id: TokenId,
    pub cls_token_id: TokenId,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("hidden_dim and num_heads must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        let ids = [self.mask_token_id, self.pad_token_id, self.cls_token_id];
        if ids.iter().any(|&id| id as usize >= self.vocab_size) {
            return Err(Error::Config("special token id outside vocabulary".into()));
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(Error::Config("special token ids must be distinct".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// A single classified token sequence.
///
/// `tokens[0]` is the `[CLS]` token, padding may appear only as a suffix,
/// and `maskable` lists the positions an explanation is allowed to mask
/// (sorted ascending, excluding `[CLS]` and padding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub tokens: Vec<TokenId>,
    pub label: usize,
    pub maskable: Vec<usize>,
    pub length: usize,
}

impl Observation {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > config.max_seq_len {
            return Err(Error::Contract(format!(
                "observation length {} outside 1..={}",
                self.tokens.len(),
                config.max_seq_len
            )));
        }
        if self.tokens[0] != config.cls_token_id {
            return Err(Error::Contract("first token must be [CLS]".into()));
        }
        if self.tokens.iter().any(|&t| t as usize >= config.vocab_size) {
            return Err(Error::Contract("token id outside vocabulary".into()));
        }
        if self.label >= config.num_classes {
            return Err(Error::Contract("label outside class range".into()));
        }
        if self.length > self.tokens.len() {
            return Err(Error::Contract("length exceeds token count".into()));
        }
        // Padding must be exactly the suffix beyond `length`.
        for (pos, &tok) in self.tokens.iter().enumerate() {
            let is_pad = tok == config.pad_token_id;
            if (pos < self.length) == is_pad {
                return Err(Error::Contract(
                    "padding must appear exactly as the suffix".into(),
                ));
            }
        }
        let mut prev: Option<usize> = None;
        for &pos in &self.maskable {
            if pos == 0 || pos >= self.length {
                return Err(Error::Contract(
                    "maskable positions must exclude [CLS] and padding".into(),
                ));
            }
            if prev.is_some_and(|p| p >= pos) {
                return Err(Error::Contract("maskable must be sorted and unique".into()));
            }
            prev = Some(pos);
        }
        Ok(())
    }
}

/// Copy of `obs` with `mask_id` written at the given positions.
///
/// Every position must be in `obs.maskable`; label, length, and the
/// maskable set are unchanged and the input is not mutated.
pub fn apply_mask(obs: &Observation, positions: &[usize], mask_id: TokenId) -> Result<Observation> {
    let mut out = obs.clone();
    for &pos in positions {
        if obs.maskable.binary_search(&pos).is_err() {
            return Err(Error::Contract(format!(
                "position {pos} is not maskable"
            )));
        }
        out.tokens[pos] = mask_id;
    }
    Ok(out)
}

/// Post-layer-norm activations from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrace {
    /// One `seq_len x hidden_dim` tensor per encoder layer.
    pub layers: Vec<Tensor>,
    /// Rows at or beyond `valid_len` are padding and carry no signal.
    pub valid_len: usize,
}

impl EmbeddingTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, Tensor::cols)
    }
}

/// Gradient of one pre-softmax logit with respect to the model input.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// `seq_len x hidden_dim` gradient w.r.t. the token-embedding vectors.
    pub embedding_grad: Tensor,
    /// `seq_len x vocab_size` gradient w.r.t. the one-hot input, derived
    /// row-wise as `embedding_grad[t] . E[v]`.
    pub onehot_grad: Tensor,
    pub target_class: usize,
}

/// Parameters of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln_attn_gamma: Tensor,
    pub ln_attn_beta: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub ln_out_gamma: Tensor,
    pub ln_out_beta: Tensor,
}

/// All trainable tensors of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Parameters {
    /// Visit every tensor with a stable name, in a fixed order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in layer.named() {
                f(&format!("layer{i}.{suffix}"), t);
            }
        }
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in layer.named_mut() {
                f(&format!("layer{i}.{suffix}"), t);
            }
        }
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Parameters {
        let mut out = self.clone();
        out.for_each_mut(|_, t| *t = Tensor::zeros(t.rows(), t.cols()));
        out
    }

    /// self += alpha * other, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Parameters) {
        let mut others: Vec<&Tensor> = Vec::new();
        other.for_each(|_, t| others.push(t));
        let mut i = 0;
        self.for_each_mut(|_, t| {
            t.axpy(alpha, others[i]);
            i += 1;
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }
}

impl LayerParams {
    fn named<'a>(&'a self) -> [(&'static str, &'a Tensor); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln_attn_gamma", &self.ln_attn_gamma),
            ("ln_attn_beta", &self.ln_attn_beta),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("ln_out_gamma", &self.ln_out_gamma),
            ("ln_out_beta", &self.ln_out_beta),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln_attn_gamma", &mut self.ln_attn_gamma),
            ("ln_attn_beta", &mut self.ln_attn_beta),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
            ("ln_out_gamma", &mut self.ln_out_gamma),
            ("ln_out_beta", &mut self.ln_out_beta),
        ]
    }
}

/// Provenance recorded alongside trained weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub strategy: String,
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// Fresh parameters drawn from `config.seed`. The classifier head
    /// starts at zero, so an untrained model predicts the uniform
    /// distribution.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = encoder::init_params(&config);
        Ok(ModelCheckpoint {
            config,
            params,
            meta: TrainingMeta::default(),
        })
    }

    /// Class probabilities, optionally with the per-layer trace.
    pub fn forward(
        &self,
        obs: &Observation,
        capture_trace: bool,
    ) -> Result<(Vec<f64>, Option<EmbeddingTrace>)> {
        obs.validate(&self.config)?;
        encoder::forward(self, obs, 1.0, capture_trace)
    }

    /// Gradient of the pre-softmax logit for `target_class` w.r.t. the input.
    pub fn input_gradient(&self, obs: &Observation, target_class: usize) -> Result<GradientBundle> {
        self.input_gradient_at(obs, target_class, 1.0)
    }

    /// Raw pre-softmax logits; the quantity gradient measures explain.
    pub fn logits(&self, obs: &Observation) -> Result<Vec<f64>> {
        obs.validate(&self.config)?;
        encoder::logits(self, obs)
    }
}

/// The surface importance measures need from a model.
///
/// `embedding_scale` interpolates the token contribution of the input in
/// one-hot space: 1 is the observation itself, 0 is the all-zero baseline.
/// Position information is not scaled.
pub trait TokenClassifier {
    fn num_classes(&self) -> usize;
    fn mask_token_id(&self) -> TokenId;

    fn class_probabilities_at(&self, obs: &Observation, embedding_scale: f64) -> Result<Vec<f64>>;

    fn input_gradient_at(
        &self,
        obs: &Observation,
        target_class: usize,
        embedding_scale: f64,
    ) -> Result<GradientBundle>;

    fn class_probabilities(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.class_probabilities_at(obs, 1.0)
    }

    /// Argmax of the class probabilities; ties break toward the lowest index.
    fn predict(&self, obs: &Observation) -> Result<usize> {
        Ok(argmax(&self.class_probabilities(obs)?))
    }
}

impl TokenClassifier for ModelCheckpoint {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn mask_token_id(&self) -> TokenId {
        self.config.mask_token_id
    }

    fn class_probabilities_at(&self, obs: &Observation, embedding_scale: f64) -> Result<Vec<f64>> {
        obs.validate(&self.config)?;
        let (probs, _) = encoder::forward(self, obs, embedding_scale, false)?;
        Ok(probs)
    }

    fn input_gradient_at(
        &self,
        obs: &Observation,
        target_class: usize,
        embedding_scale: f64,
    ) -> Result<GradientBundle> {
        obs.validate(&self.config)?;
        if target_class >= self.config.num_classes {
            return Err(Error::Contract("target class out of range".into()));
        }
        encoder::input_gradient(self, obs, target_class, embedding_scale)
    }
}

/// Cross-entropy loss and parameter gradients for one observation.
pub fn encoder_grads(model: &ModelCheckpoint, obs: &Observation) -> Result<(f64, Parameters)> {
    let mut graph = encoder::build_graph(model, obs, 1.0);
    let loss = graph.loss(obs.label);
    let loss_value = graph.tape.value(loss).get(0, 0);
    let grads = graph.parameter_grads(loss, &model.params);
    Ok((loss_value, grads))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
