//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] walks that list in reverse and
//! accumulates gradients. The op set is exactly what the encoder needs —
//! there is no broadcasting machinery beyond row-vector bias addition.
//!
//! Gradients flow to every leaf, so the same tape serves parameter
//! training and input attribution: seed the root with `1` for a loss, or
//! with a one-hot row to differentiate a single logit.

use crate::tensor::Tensor;

const GELU_COEFF: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    /// matrix + row vector, broadcast over rows
    AddRow(usize, usize),
    /// matrix + constant tensor (no gradient into the constant)
    AddConst(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu(usize),
    /// rows of `table` selected by index
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    /// scalar cross-entropy of a `1 x C` logit row against a class index
    SoftmaxCrossEntropy {
        logits: usize,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shapes must agree");
        let mut out = ta.clone();
        out.axpy(1.0, tb);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tb.rows(), 1, "bias must be a row vector");
        assert_eq!(tx.cols(), tb.cols(), "bias width must match");
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tb.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x.0, bias.0))
    }

    pub fn add_const(&mut self, x: Var, constant: &Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), constant.shape(), "constant shape must match");
        let mut out = tx.clone();
        out.axpy(1.0, constant);
        self.push(out, Op::AddConst(x.0))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(alpha);
        self.push(out, Op::Scale(x.0, alpha))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = tx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x.0))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(tg.rows(), 1);
        assert_eq!(tb.rows(), 1);
        assert_eq!(tx.cols(), tg.cols());
        assert_eq!(tx.cols(), tb.cols());
        let mut out = Tensor::zeros(tx.rows(), tx.cols());
        for r in 0..tx.rows() {
            let (mean, std) = row_moments(tx.row(r), eps);
            for c in 0..tx.cols() {
                let xn = (tx.get(r, c) - mean) / std;
                out.set(r, c, tg.get(0, c) * xn + tb.get(0, c));
            }
        }
        self.push(
            out,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = tx.clone();
        for v in out.as_mut_slice() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x.0))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tt = self.value(table);
        let mut out = Tensor::zeros(indices.len(), tt.cols());
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tt.row(idx));
        }
        self.push(
            out,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows());
        let mut out = Tensor::zeros(len, tx.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(tx.row(start + r));
        }
        self.push(out, Op::SliceRows { x: x.0, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.cols());
        let out = Tensor::from_fn(tx.rows(), len, |r, c| tx.get(r, start + c));
        self.push(out, Op::SliceCols { x: x.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + tp.cols()].copy_from_slice(tp.row(r));
            }
            offset += tp.cols();
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rows(), 1, "logits must be a single row");
        assert!(target < tl.cols(), "target class out of range");
        let row = tl.row(0);
        let loss = log_sum_exp(row) - row[target];
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                target,
            },
        )
    }

    /// Back-propagate `seed` from `root` to every reachable node.
    pub fn backward(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            seed.shape(),
            "seed must match root shape"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, dy.clone());
                let mut db = Tensor::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, &g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::AddConst(x) => accumulate(grads, *x, dy.clone()),
            Op::Scale(x, alpha) => {
                let mut dx = dy.clone();
                dx.scale_in_place(*alpha);
                accumulate(grads, *x, dx);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accumulate(grads, *a, dy.matmul(&tb.transpose()));
                accumulate(grads, *b, ta.transpose().matmul(dy));
            }
            Op::Transpose(x) => accumulate(grads, *x, dy.transpose()),
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = dy.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, (dy.get(r, c) - dot) * y.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let n = tx.cols() as f64;
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                let mut dgamma = Tensor::zeros(1, tx.cols());
                let mut dbeta = Tensor::zeros(1, tx.cols());
                for r in 0..tx.rows() {
                    let (mean, std) = row_moments(tx.row(r), *eps);
                    let xn: Vec<f64> =
                        tx.row(r).iter().map(|&v| (v - mean) / std).collect();
                    let g: Vec<f64> = (0..tx.cols())
                        .map(|c| dy.get(r, c) * tg.get(0, c))
                        .collect();
                    let g_mean: f64 = g.iter().sum::<f64>() / n;
                    let gx_mean: f64 =
                        g.iter().zip(&xn).map(|(gi, xi)| gi * xi).sum::<f64>() / n;
                    for c in 0..tx.cols() {
                        dx.set(r, c, (g[c] - g_mean - xn[c] * gx_mean) / std);
                        dgamma.set(0, c, dgamma.get(0, c) + dy.get(r, c) * xn[c]);
                        dbeta.set(0, c, dbeta.get(0, c) + dy.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[*x].value;
                let mut dx = dy.clone();
                for (g, &v) in dx.as_mut_slice().iter_mut().zip(tx.as_slice()) {
                    *g *= gelu_derivative(v);
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, indices } => {
                let tt = &self.nodes[*table].value;
                let mut dt = Tensor::zeros(tt.rows(), tt.cols());
                for (r, &idx_row) in indices.iter().enumerate() {
                    for (o, &g) in dt.row_mut(idx_row).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::SliceRows { x, start } => {
                let tx = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        dx.set(r, start + c, dy.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols();
                    let dp = Tensor::from_fn(dy.rows(), cols, |r, c| dy.get(r, offset + c));
                    accumulate(grads, p, dp);
                    offset += cols;
                }
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let tl = &self.nodes[*logits].value;
                let mut probs = tl.clone();
                softmax_in_place(probs.row_mut(0));
                probs.set(0, *target, probs.get(0, *target) - 1.0);
                probs.scale_in_place(dy.get(0, 0));
                accumulate(grads, *logits, probs);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], addressed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.axpy(1.0, &delta),
        slot @ None => *slot = Some(delta),
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite difference of a scalar-valued graph w.r.t. one leaf entry.
    fn finite_diff(
        build: &dyn Fn(&mut Tape, &[Tensor]) -> Var,
        leaves: &[Tensor],
        leaf: usize,
        r: usize,
        c: usize,
        h: f64,
    ) -> f64 {
        let eval = |delta: f64| {
            let mut bumped = leaves.to_vec();
            let v = bumped[leaf].get(r, c);
            bumped[leaf].set(r, c, v + delta);
            let mut tape = Tape::new();
            let root = build(&mut tape, &bumped);
            tape.value(root).get(0, 0)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn check_all_leaves(build: &dyn Fn(&mut Tape, &[Tensor]) -> Var, leaves: &[Tensor]) {
        let mut tape = Tape::new();
        let root = build(&mut tape, leaves);
        let grads = tape.backward(root, Tensor::from_vec(1, 1, vec![1.0]));
        // Leaves were pushed first, in order.
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.wrt(Var(li)).expect("leaf should receive a gradient");
            for r in 0..leaf.rows() {
                for c in 0..leaf.cols() {
                    let num = finite_diff(build, leaves, li, r, c, 1e-5);
                    let ana = g.get(r, c);
                    let denom = ana.abs().max(num.abs()).max(1e-6);
                    assert!(
                        (ana - num).abs() / denom < 1e-5,
                        "leaf {li} [{r},{c}]: analytic {ana} vs numeric {num}"
                    );
                }
            }
        }
    }

    fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = crate::rng::derive_rng(11, "autodiff-test");
        for _ in 0..5 {
            let x = rand_tensor(&mut rng, 3, 4);
            let w = rand_tensor(&mut rng, 4, 4);
            let b = rand_tensor(&mut rng, 1, 4);
            let gamma = rand_tensor(&mut rng, 1, 4);
            let beta = rand_tensor(&mut rng, 1, 4);
            let head = rand_tensor(&mut rng, 4, 3);
            let leaves = vec![x, w, b, gamma, beta, head];
            let build = |tape: &mut Tape, ls: &[Tensor]| {
                let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
                let (x, w, b, gamma, beta, head) =
                    (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
                let h = tape.matmul(x, w);
                let h = tape.add_row(h, b);
                let h = tape.gelu(h);
                let h = tape.layer_norm_rows(h, gamma, beta, 1e-5);
                let h = tape.add(h, x);
                let cls = tape.slice_rows(h, 0, 1);
                let logits = tape.matmul(cls, head);
                tape.softmax_cross_entropy(logits, 1)
            };
            check_all_leaves(&build, &leaves);
        }
    }

    #[test]
    fn attention_shaped_graph_matches_finite_differences() {
        let mut rng = crate::rng::derive_rng(13, "autodiff-attn");
        let x = rand_tensor(&mut rng, 3, 4);
        let wq = rand_tensor(&mut rng, 4, 4);
        let wk = rand_tensor(&mut rng, 4, 4);
        let wv = rand_tensor(&mut rng, 4, 4);
        let head = rand_tensor(&mut rng, 2, 1);
        let leaves = vec![x, wq, wk, wv, head];
        let build = |tape: &mut Tape, ls: &[Tensor]| {
            let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
            let (x, wq, wk, wv, head) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let q0 = tape.slice_cols(q, 0, 2);
            let k0 = tape.slice_cols(k, 0, 2);
            let v0 = tape.slice_cols(v, 0, 2);
            let kt = tape.transpose(k0);
            let scores = tape.matmul(q0, kt);
            let scores = tape.scale(scores, 1.0 / (2.0f64).sqrt());
            let attn = tape.softmax_rows(scores);
            let ctx = tape.matmul(attn, v0);
            let cls = tape.slice_rows(ctx, 0, 1);
            tape.matmul(cls, head)
        };
        check_all_leaves(&build, &leaves);
    }

    #[test]
    fn gather_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let picked = tape.gather_rows(table, &[0, 0, 1]);
        // sum of all entries
        let ones = tape.leaf(Tensor::from_vec(2, 1, vec![1.0, 1.0]));
        let summed = tape.matmul(picked, ones);
        let collapse = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, 1.0, 1.0]));
        let root = tape.matmul(collapse, summed);
        let grads = tape.backward(root, Tensor::from_vec(1, 1, vec![1.0]));
        let dt = grads.wrt(table).unwrap();
        assert_eq!(dt.as_slice(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::row_vector(vec![0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, 0);
        assert!((tape.value(loss).get(0, 0) - (2.0f64).ln()).abs() < 1e-12);
        let grads = tape.backward(loss, Tensor::from_vec(1, 1, vec![1.0]));
        let g = grads.wrt(logits).unwrap();
        assert!((g.get(0, 0) - (-0.5)).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-12);
    }
}
