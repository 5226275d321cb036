//! Answer head: fuse the final memory with the question vector and classify
//! over a fixed answer vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, duplicate-free answer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    answers: Vec<String>,
}

impl AnswerSpace {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for a in &answers {
            if !seen.insert(a.as_str()) {
                return Err(Error::Invalid(format!("duplicate answer '{a}'")));
            }
        }
        if answers.len() < 2 {
            return Err(Error::Invalid("answer space needs at least two answers".into()));
        }
        Ok(Self { answers })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn index_of(&self, answer: &str) -> Result<usize> {
        self.answers
            .iter()
            .position(|a| a == answer)
            .ok_or_else(|| Error::Invalid(format!("answer '{answer}' not in answer space")))
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct AnswerParams {
    /// `d x 2d`
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    /// Running statistics (buffers, not trained).
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    /// `|A| x d`
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AnswerParams {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, answers: usize) -> Self {
        Self {
            w_fuse: store.add("head.w_fuse", params::linear_init(rng, d, 2 * d)),
            b_fuse: store.add("head.b_fuse", Tensor::zeros(d, 1)),
            w1: store.add("head.w1", params::linear_init(rng, d, d)),
            b1: store.add("head.b1", Tensor::zeros(d, 1)),
            bn_gamma: store.add("head.bn_gamma", Tensor::filled(d, 1, 1.0)),
            bn_beta: store.add("head.bn_beta", Tensor::zeros(d, 1)),
            bn_mean: store.add_buffer("head.bn_running_mean", Tensor::zeros(d, 1)),
            bn_var: store.add_buffer("head.bn_running_var", Tensor::filled(d, 1, 1.0)),
            w2: store.add("head.w2", params::linear_init(rng, answers, d)),
            b2: store.add("head.b2", Tensor::zeros(answers, 1)),
        }
    }

    /// Blend batch statistics into the running buffers.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats, momentum: f64) {
        let blend = |t: &mut Tensor, batch: &[f64]| {
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        };
        blend(store.get_mut(self.bn_mean), &stats.mean);
        blend(store.get_mut(self.bn_var), &stats.var_unbiased);
    }
}

/// `J = W [m_T ; q] + b`, applied column-wise when given batches.
pub fn fuse(tape: &mut Tape, w: Var, b: Var, m: Var, q: Var) -> Result<Var> {
    if tape.shape(m) != tape.shape(q) {
        return Err(Error::shape("fuse", format!("memory {:?} vs question {:?}", tape.shape(m), tape.shape(q))));
    }
    let cat = tape.concat(m, q, 0)?;
    let y = tape.matmul(w, cat)?;
    tape.add(y, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Logits `|A| x B` for fused vectors `j: d x B`. Training mode also
/// returns the batch statistics to fold into the running buffers.
pub fn classify(
    tape: &mut Tape,
    p: &AnswerParams,
    j: Var,
    mode: BnMode,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let h = tape.matmul(w1, j)?;
    let h = tape.add(h, b1)?;
    let h = tape.elu(h)?;
    let gamma = tape.param(p.bn_gamma);
    let beta = tape.param(p.bn_beta);
    let (normed, stats) = match mode {
        BnMode::Train => {
            let (y, s) = tape.batch_norm_train(h, gamma, beta, eps)?;
            (y, Some(s))
        }
        BnMode::Eval => (batch_norm_eval(tape, p, h, gamma, beta, eps)?, None),
    };
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let logits = tape.matmul(w2, normed)?;
    Ok((tape.add(logits, b2)?, stats))
}

fn batch_norm_eval(tape: &mut Tape, p: &AnswerParams, h: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let mean = tape.param(p.bn_mean);
    let var = tape.param(p.bn_var);
    let inv_std: Vec<f64> = tape.value(var).iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let rows = inv_std.len();
    let inv_std = tape.constant(Tensor::new(rows, 1, inv_std)?);
    let centered = tape.sub(h, mean)?;
    let scaled = tape.mul(centered, inv_std)?;
    let scaled = tape.mul(scaled, gamma)?;
    tape.add(scaled, beta)
}

/// Mean loss over the batch.
pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.cross_entropy(logits, labels),
        LossKind::BinaryCrossEntropy => tape.one_vs_all_bce(logits, labels),
    }
}

/// Index of the largest value in each column; ties resolve to the lowest index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    (0..logits.cols())
        .map(|c| {
            let col = logits.column_values(c);
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
