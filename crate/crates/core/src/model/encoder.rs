//! Forward and gradient passes of the encoder, built on the autodiff tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    EmbeddingTrace, GradientBundle, LayerParams, ModelCheckpoint, ModelConfig, Observation,
    Parameters,
};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const ATTN_MASK_BIAS: f64 = -1e30;

pub(super) fn init_params(config: &ModelConfig) -> Parameters {
    let mut rng = derive_rng(config.seed, "model-init");
    let h = config.hidden_dim;
    let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
        Tensor::from_fn(rows, cols, |_, _| std * standard_normal(rng))
    };
    let layers = (0..config.num_layers)
        .map(|_| {
            let proj_std = 1.0 / (h as f64).sqrt();
            LayerParams {
                wq: normal(&mut rng, h, h, proj_std),
                bq: Tensor::zeros(1, h),
                wk: normal(&mut rng, h, h, proj_std),
                bk: Tensor::zeros(1, h),
                wv: normal(&mut rng, h, h, proj_std),
                bv: Tensor::zeros(1, h),
                wo: normal(&mut rng, h, h, proj_std),
                bo: Tensor::zeros(1, h),
                ln_attn_gamma: Tensor::from_fn(1, h, |_, _| 1.0),
                ln_attn_beta: Tensor::zeros(1, h),
                w_up: normal(&mut rng, h, config.mlp_dim(), proj_std),
                b_up: Tensor::zeros(1, config.mlp_dim()),
                w_down: normal(&mut rng, config.mlp_dim(), h, 1.0 / (config.mlp_dim() as f64).sqrt()),
                b_down: Tensor::zeros(1, h),
                ln_out_gamma: Tensor::from_fn(1, h, |_, _| 1.0),
                ln_out_beta: Tensor::zeros(1, h),
            }
        })
        .collect();
    Parameters {
        token_embedding: normal(&mut rng, config.vocab_size, h, 0.1),
        position_embedding: normal(&mut rng, config.max_seq_len, h, 0.1),
        layers,
        // Zero head: an untrained model emits the uniform distribution.
        head_w: Tensor::zeros(h, config.num_classes),
        head_b: Tensor::zeros(1, config.num_classes),
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Leaf variables for every parameter tensor, in `Parameters` order.
struct ParamVars {
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<LayerVars>,
    head_w: Var,
    head_b: Var,
}

struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln_attn_gamma: Var,
    ln_attn_beta: Var,
    w_up: Var,
    b_up: Var,
    w_down: Var,
    b_down: Var,
    ln_out_gamma: Var,
    ln_out_beta: Var,
}

fn register_params(tape: &mut Tape, params: &Parameters) -> ParamVars {
    ParamVars {
        token_embedding: tape.leaf(params.token_embedding.clone()),
        position_embedding: tape.leaf(params.position_embedding.clone()),
        layers: params
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: tape.leaf(l.wq.clone()),
                bq: tape.leaf(l.bq.clone()),
                wk: tape.leaf(l.wk.clone()),
                bk: tape.leaf(l.bk.clone()),
                wv: tape.leaf(l.wv.clone()),
                bv: tape.leaf(l.bv.clone()),
                wo: tape.leaf(l.wo.clone()),
                bo: tape.leaf(l.bo.clone()),
                ln_attn_gamma: tape.leaf(l.ln_attn_gamma.clone()),
                ln_attn_beta: tape.leaf(l.ln_attn_beta.clone()),
                w_up: tape.leaf(l.w_up.clone()),
                b_up: tape.leaf(l.b_up.clone()),
                w_down: tape.leaf(l.w_down.clone()),
                b_down: tape.leaf(l.b_down.clone()),
                ln_out_gamma: tape.leaf(l.ln_out_gamma.clone()),
                ln_out_beta: tape.leaf(l.ln_out_beta.clone()),
            })
            .collect(),
        head_w: tape.leaf(params.head_w.clone()),
        head_b: tape.leaf(params.head_b.clone()),
    }
}

/// A recorded forward pass, with handles to the nodes later passes need.
pub(crate) struct ForwardGraph {
    pub tape: Tape,
    pub logits: Var,
    /// The scaled token-embedding input; its gradient is `embedding_grad`.
    pub token_input: Var,
    pub layer_outputs: Vec<Var>,
    vars: ParamVars,
}

pub(crate) fn build_graph(
    checkpoint: &ModelCheckpoint,
    obs: &Observation,
    embedding_scale: f64,
) -> ForwardGraph {
    let config = &checkpoint.config;
    let seq_len = obs.tokens.len();
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, &checkpoint.params);

    let token_indices: Vec<usize> = obs.tokens.iter().map(|&t| t as usize).collect();
    let gathered = tape.gather_rows(vars.token_embedding, &token_indices);
    let token_input = tape.scale(gathered, embedding_scale);
    let positions = tape.slice_rows(vars.position_embedding, 0, seq_len);
    let mut x = tape.add(token_input, positions);

    // Keys at padding positions are unreachable from every query.
    let key_mask = Tensor::from_fn(seq_len, seq_len, |_, key| {
        if key >= obs.length {
            ATTN_MASK_BIAS
        } else {
            0.0
        }
    });

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut layer_outputs = Vec::with_capacity(config.num_layers);

    for layer in &vars.layers {
        let q = tape.matmul(x, layer.wq);
        let q = tape.add_row(q, layer.bq);
        let k = tape.matmul(x, layer.wk);
        let k = tape.add_row(k, layer.bk);
        let v = tape.matmul(x, layer.wv);
        let v = tape.add_row(v, layer.bv);

        let mut head_outputs = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, &key_mask);
            let attn = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&head_outputs);
        let attn_out = tape.matmul(ctx, layer.wo);
        let attn_out = tape.add_row(attn_out, layer.bo);

        let residual = tape.add(x, attn_out);
        let normed = tape.layer_norm_rows(
            residual,
            layer.ln_attn_gamma,
            layer.ln_attn_beta,
            LAYER_NORM_EPS,
        );

        let up = tape.matmul(normed, layer.w_up);
        let up = tape.add_row(up, layer.b_up);
        let act = tape.gelu(up);
        let down = tape.matmul(act, layer.w_down);
        let down = tape.add_row(down, layer.b_down);

        let residual = tape.add(normed, down);
        x = tape.layer_norm_rows(
            residual,
            layer.ln_out_gamma,
            layer.ln_out_beta,
            LAYER_NORM_EPS,
        );
        layer_outputs.push(x);
    }

    let cls = tape.slice_rows(x, 0, 1);
    let logits = tape.matmul(cls, vars.head_w);
    let logits = tape.add_row(logits, vars.head_b);

    ForwardGraph {
        tape,
        logits,
        token_input,
        layer_outputs,
        vars,
    }
}

impl ForwardGraph {
    fn check_finite(&self) -> Result<()> {
        for (i, &var) in self.layer_outputs.iter().enumerate() {
            if !self.tape.value(var).is_finite() {
                return Err(Error::NonFinite {
                    context: "layer activation",
                    layer: Some(i),
                });
            }
        }
        if !self.tape.value(self.logits).is_finite() {
            return Err(Error::NonFinite {
                context: "logits",
                layer: None,
            });
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let logits = self.tape.value(self.logits).row(0);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    }

    pub fn trace(&self, valid_len: usize) -> EmbeddingTrace {
        EmbeddingTrace {
            layers: self
                .layer_outputs
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            valid_len,
        }
    }

    /// Cross-entropy loss node for the given label, appended to the tape.
    pub fn loss(&mut self, label: usize) -> Var {
        self.tape.softmax_cross_entropy(self.logits, label)
    }

    /// Parameter gradients of a scalar node, shaped like the parameters.
    pub fn parameter_grads(&self, root: Var, template: &Parameters) -> Parameters {
        let grads = self.tape.backward(root, Tensor::from_vec(1, 1, vec![1.0]));
        let mut out = template.zeros_like();
        let v = &self.vars;
        let copy = |var: Var, dst: &mut Tensor| {
            if let Some(g) = grads.wrt(var) {
                dst.axpy(1.0, g);
            }
        };
        copy(v.token_embedding, &mut out.token_embedding);
        copy(v.position_embedding, &mut out.position_embedding);
        for (lv, lp) in v.layers.iter().zip(out.layers.iter_mut()) {
            copy(lv.wq, &mut lp.wq);
            copy(lv.bq, &mut lp.bq);
            copy(lv.wk, &mut lp.wk);
            copy(lv.bk, &mut lp.bk);
            copy(lv.wv, &mut lp.wv);
            copy(lv.bv, &mut lp.bv);
            copy(lv.wo, &mut lp.wo);
            copy(lv.bo, &mut lp.bo);
            copy(lv.ln_attn_gamma, &mut lp.ln_attn_gamma);
            copy(lv.ln_attn_beta, &mut lp.ln_attn_beta);
            copy(lv.w_up, &mut lp.w_up);
            copy(lv.b_up, &mut lp.b_up);
            copy(lv.w_down, &mut lp.w_down);
            copy(lv.b_down, &mut lp.b_down);
            copy(lv.ln_out_gamma, &mut lp.ln_out_gamma);
            copy(lv.ln_out_beta, &mut lp.ln_out_beta);
        }
        copy(v.head_w, &mut out.head_w);
        copy(v.head_b, &mut out.head_b);
        out
    }
}

pub(super) fn logits(checkpoint: &ModelCheckpoint, obs: &Observation) -> Result<Vec<f64>> {
    let graph = build_graph(checkpoint, obs, 1.0);
    graph.check_finite()?;
    Ok(graph.tape.value(graph.logits).row(0).to_vec())
}

pub(super) fn forward(
    checkpoint: &ModelCheckpoint,
    obs: &Observation,
    embedding_scale: f64,
    capture_trace: bool,
) -> Result<(Vec<f64>, Option<EmbeddingTrace>)> {
    let graph = build_graph(checkpoint, obs, embedding_scale);
    graph.check_finite()?;
    let probs = graph.probabilities();
    let trace = capture_trace.then(|| graph.trace(obs.length));
    Ok((probs, trace))
}

pub(super) fn input_gradient(
    checkpoint: &ModelCheckpoint,
    obs: &Observation,
    target_class: usize,
    embedding_scale: f64,
) -> Result<GradientBundle> {
    let graph = build_graph(checkpoint, obs, embedding_scale);
    graph.check_finite()?;

    let mut seed = Tensor::zeros(1, checkpoint.config.num_classes);
    seed.set(0, target_class, 1.0);
    let grads = graph.tape.backward(graph.logits, seed);
    let embedding_grad = grads
        .wrt(graph.token_input)
        .expect("input embedding is reachable from the logits")
        .clone();
    if !embedding_grad.is_finite() {
        return Err(Error::NonFinite {
            context: "input gradient",
            layer: None,
        });
    }

    // One-hot gradient row t is E . embedding_grad[t]; keeping this single
    // arithmetic path makes the consistency invariant exact.
    let embeddings = &checkpoint.params.token_embedding;
    let onehot_grad = Tensor::from_fn(obs.tokens.len(), checkpoint.config.vocab_size, |t, v| {
        dot(embeddings.row(v), embedding_grad.row(t))
    });

    Ok(GradientBundle {
        embedding_grad,
        onehot_grad,
        target_class,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
