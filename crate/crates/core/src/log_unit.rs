//! One language-binding object graph (LOG) reasoning step.
//!
//! A step builds a query-conditioned adjacency over the visual objects,
//! binds each object to a weighted mix of question words, refines the bound
//! node features with a residual GCN over that adjacency, pools them into a
//! single vector and folds it into the working memory.
//!
//! The sub-operations take weights as tape variables so they can be
//! exercised with hand-set matrices; [`step`] wires them to stored
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights indexed by reasoning step.
#[derive(Debug, Clone)]
pub struct StepParams {
    pub w_v: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_qproj: ParamId,
    pub b_qproj: ParamId,
    pub head_mix: ParamId,
    pub w_alpha: ParamId,
    pub w_desc: ParamId,
    pub w_vhat: ParamId,
    pub w_bind_v: ParamId,
    pub w_bind_e: ParamId,
    pub w_beta: ParamId,
    pub w_delta: ParamId,
    pub w_m: ParamId,
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub w1: ParamId,
    pub w2: ParamId,
    pub b: ParamId,
}

/// Weights shared by all steps.
#[derive(Debug, Clone)]
pub struct SharedParams {
    pub b_v: ParamId,
    pub b_vhat: ParamId,
    pub w_z0: ParamId,
    pub b_z0: ParamId,
    pub w_z1: ParamId,
    pub b_z1: ParamId,
    pub w_x: ParamId,
    pub gcn: Vec<GcnLayer>,
    pub b_m: ParamId,
    pub m0: ParamId,
}

#[derive(Debug, Clone)]
pub struct LogUnitParams {
    pub steps: Vec<StepParams>,
    pub shared: SharedParams,
    pub heads: usize,
    pub binding: bool,
}

impl LogUnitParams {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let k = cfg.effective_heads();
        let (r, p) = (cfg.descriptor_rows, cfg.lexical_types);
        let distinct = if cfg.tie_steps { 1 } else { cfg.steps };
        let mut steps = Vec::with_capacity(cfg.steps);
        for t in 0..distinct {
            let mut lin = |name: &str, rows: usize, cols: usize| {
                store.add(format!("log.step{t}.{name}"), params::linear_init(rng, rows, cols))
            };
            let w_v = lin("w_v", d, 2 * d);
            let w_q = lin("w_q", d, d);
            let w_qproj = lin("w_qproj", d, 2 * d);
            let w_alpha = lin("w_alpha", k, d);
            let w_desc = lin("w_desc", r, d);
            let w_vhat = lin("w_vhat", d, 2 * d);
            let w_bind_v = lin("w_bind_v", d, d);
            let w_bind_e = lin("w_bind_e", d, d);
            let w_beta = lin("w_beta", p, d);
            let w_delta = lin("w_delta", 1, d);
            let w_m = lin("w_m", d, 2 * d);
            let b_q = store.add(format!("log.step{t}.b_q"), Tensor::zeros(d, 1));
            let b_qproj = store.add(format!("log.step{t}.b_qproj"), Tensor::zeros(d, 1));
            let head_mix = store.add(format!("log.step{t}.head_mix"), Tensor::zeros(k, 1));
            steps.push(StepParams {
                w_v,
                w_q,
                b_q,
                w_qproj,
                b_qproj,
                head_mix,
                w_alpha,
                w_desc,
                w_vhat,
                w_bind_v,
                w_bind_e,
                w_beta,
                w_delta,
                w_m,
            });
        }
        while steps.len() < cfg.steps {
            steps.push(steps[0].clone());
        }

        let w_z0 = store.add("log.w_z0", params::linear_init(rng, d, d));
        let w_z1 = store.add("log.w_z1", params::linear_init(rng, p, d));
        let w_x = store.add("log.w_x", params::linear_init(rng, d, 2 * d));
        let layers = if cfg.tie_gcn { 1 } else { cfg.gcn_layers };
        let mut gcn = Vec::with_capacity(cfg.gcn_layers);
        for h in 0..layers {
            gcn.push(GcnLayer {
                w1: store.add(format!("log.gcn{h}.w1"), params::linear_init(rng, d, d)),
                w2: store.add(format!("log.gcn{h}.w2"), params::linear_init(rng, d, d)),
                b: store.add(format!("log.gcn{h}.b"), Tensor::zeros(d, 1)),
            });
        }
        while gcn.len() < cfg.gcn_layers {
            gcn.push(gcn[0].clone());
        }
        let shared = SharedParams {
            b_v: store.add("log.b_v", Tensor::zeros(d, 1)),
            b_vhat: store.add("log.b_vhat", Tensor::zeros(d, 1)),
            w_z0,
            b_z0: store.add("log.b_z0", Tensor::zeros(d, 1)),
            w_z1,
            b_z1: store.add("log.b_z1", Tensor::zeros(p, 1)),
            w_x,
            gcn,
            b_m: store.add("log.b_m", Tensor::zeros(d, 1)),
            m0: store.add("log.m0", Tensor::zeros(d, 1)),
        };
        Self { steps, shared, heads: k, binding: !cfg.disable_binding }
    }
}

/// Recurrent state between steps. `c` is `None` before the first step.
#[derive(Debug, Clone, Copy)]
pub struct LogState {
    pub m: Var,
    pub c: Option<Var>,
    /// Number of completed steps.
    pub t: usize,
}

impl LogState {
    pub fn initial(tape: &mut Tape, p: &LogUnitParams) -> Self {
        Self { m: tape.param(p.shared.m0), c: None, t: 0 }
    }
}

/// Tape handles of everything a step exposes for inspection.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub alpha: Var,
    pub gamma: Var,
    pub descriptors: Var,
    pub adjacency: Var,
    pub beta: Option<Var>,
    pub type_softmax: Option<Var>,
    pub lexical_gate: Option<Var>,
    pub delta: Var,
    pub x_tilde: Var,
}

/// Materialized attention maps and graphs of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// `K x S` word attention per head.
    pub alpha: Tensor,
    /// `K` head-mixing weights.
    pub gamma: Vec<f64>,
    /// `r x N` node descriptors, each row a distribution over objects.
    pub descriptors: Tensor,
    /// `N x N` visual adjacency.
    pub adjacency: Tensor,
    /// `N x S` object-word binding weights (zero when binding is disabled).
    pub beta: Tensor,
    /// `(P * N) x S` per-type binding softmaxes, type-major.
    pub type_softmax: Option<Tensor>,
    /// `P x S` lexical-type gate.
    pub lexical_gate: Option<Tensor>,
    /// `N` readout weights.
    pub delta: Vec<f64>,
}

impl StepTrace {
    pub fn from_tape(tape: &Tape, step: usize, vars: &StepVars, objects: usize, words: usize) -> Self {
        Self {
            step,
            alpha: tape.tensor(vars.alpha),
            gamma: tape.value(vars.gamma).to_vec(),
            descriptors: tape.tensor(vars.descriptors),
            adjacency: tape.tensor(vars.adjacency),
            beta: vars.beta.map_or_else(|| Tensor::zeros(objects, words), |b| tape.tensor(b)),
            type_softmax: vars.type_softmax.map(|v| tape.tensor(v)),
            lexical_gate: vars.lexical_gate.map(|v| tape.tensor(v)),
            delta: tape.value(vars.delta).to_vec(),
        }
    }

    /// Mean over objects of the largest binding weight.
    pub fn binding_sharpness(&self) -> f64 {
        let n = self.beta.rows();
        if n == 0 {
            return 0.0;
        }
        (0..n)
            .map(|i| self.beta.row_values(i).iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / n as f64
    }
}

fn modulate(tape: &mut Tape, v: Var, m: Var) -> Result<Var> {
    let mv = tape.mul(v, m)?;
    tape.concat(v, mv, 0)
}

fn affine(tape: &mut Tape, w: Var, x: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    tape.add(y, b)
}

/// `V_t = W_v [V ; m ⊙ V] + b_v` with the memory broadcast over objects.
pub fn augment_nodes(tape: &mut Tape, w_v: Var, b_v: Var, v: Var, m_prev: Var) -> Result<Var> {
    let x = modulate(tape, v, m_prev)?;
    affine(tape, w_v, x, b_v)
}

#[derive(Debug, Clone, Copy)]
pub struct ControlWeights {
    pub w_q: Var,
    pub b_q: Var,
    pub w_qproj: Var,
    pub b_qproj: Var,
    pub head_mix: Var,
    pub w_alpha: Var,
}

/// Controlling signals `c: d x K`, word attention `alpha: K x S` and head
/// mix `gamma: K x 1`. Before the first step every head starts from the
/// step query `q_t`.
pub fn control_signals(
    tape: &mut Tape,
    w: &ControlWeights,
    q: Var,
    c_prev: Option<Var>,
    l: Var,
) -> Result<(Var, Var, Var)> {
    let [_, s] = tape.shape(l);
    if s == 0 {
        return Err(Error::Invalid("no words to attend over".into()));
    }
    let k = tape.shape(w.w_alpha)[0];
    let q_t = affine(tape, w.w_q, q, w.b_q)?;
    let c_prev = match c_prev {
        Some(c) => c,
        None => tape.repeat_cols(q_t, k)?,
    };
    let gamma = tape.softmax(w.head_mix, 0)?;
    let mixed = tape.matmul(c_prev, gamma)?;
    let q_cat = tape.concat(q_t, mixed, 0)?;
    let q_proj = affine(tape, w.w_qproj, q_cat, w.b_qproj)?;
    let modulated = tape.mul(l, q_proj)?;
    let scores = tape.matmul(w.w_alpha, modulated)?;
    let alpha = tape.softmax(scores, 1)?;
    let alpha_t = tape.transpose(alpha)?;
    let c = tape.matmul(l, alpha_t)?;
    Ok((c, alpha, gamma))
}

/// `norm(W_desc Σ_k V ⊙ c_k)`, softmax over objects so each row of the
/// `r x N` result is a distribution.
pub fn node_descriptors(tape: &mut Tape, w_desc: Var, v: Var, c: Var) -> Result<Var> {
    let k = tape.shape(c)[1];
    let ones = tape.constant(Tensor::filled(k, 1, 1.0));
    let c_sum = tape.matmul(c, ones)?;
    let vc = tape.mul(v, c_sum)?;
    let pre = tape.matmul(w_desc, vc)?;
    tape.softmax(pre, 1)
}

/// `A = Ṽᵀ Ṽ`.
pub fn adjacency(tape: &mut Tape, descriptors: Var) -> Result<Var> {
    let t = tape.transpose(descriptors)?;
    tape.matmul(t, descriptors)
}

#[derive(Debug, Clone, Copy)]
pub struct BindingWeights {
    pub w_vhat: Var,
    pub b_vhat: Var,
    pub w_z0: Var,
    pub b_z0: Var,
    pub w_z1: Var,
    pub b_z1: Var,
    pub w_bind_v: Var,
    pub w_bind_e: Var,
    pub w_beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Binding {
    /// `d x N` linguistic supplement of each object.
    pub f: Var,
    /// `N x S`
    pub beta: Var,
    /// `(P * N) x S`
    pub type_softmax: Var,
    /// `P x S`
    pub gate: Var,
}

/// Object-to-word binding weights and the per-object word composition.
pub fn language_binding(tape: &mut Tape, w: &BindingWeights, v: Var, l: Var, m_prev: Var) -> Result<Binding> {
    let [_, n] = tape.shape(v);
    let [_, s] = tape.shape(l);
    let p = tape.shape(w.w_beta)[0];
    let v_in = modulate(tape, v, m_prev)?;
    let v_hat = affine(tape, w.w_vhat, v_in, w.b_vhat)?;

    let z0 = affine(tape, w.w_z0, l, w.b_z0)?;
    let z1 = affine(tape, w.w_z1, z0, w.b_z1)?;
    let gate = tape.sigmoid(z1)?;

    let obj = tape.matmul(w.w_bind_v, v_hat)?;
    let word = tape.matmul(w.w_bind_e, l)?;
    let pair = tape.pairwise_add(obj, word)?;
    let pair = tape.tanh(pair)?;
    let scores = tape.matmul(w.w_beta, pair)?;
    let scores = tape.reshape(scores, p * n, s)?;
    let type_softmax = tape.softmax(scores, 1)?;
    let per_type = tape.reshape(type_softmax, p, n * s)?;
    let gate_tiled = tape.repeat_cols(gate, n)?;
    let gated = tape.mul(per_type, gate_tiled)?;
    let ones = tape.constant(Tensor::filled(1, p, 1.0));
    let beta = tape.matmul(ones, gated)?;
    let beta = tape.reshape(beta, n, s)?;
    let beta_t = tape.transpose(beta)?;
    let f = tape.matmul(l, beta_t)?;
    Ok(Binding { f, beta, type_softmax, gate })
}

#[derive(Debug, Clone, Copy)]
pub struct GcnWeights {
    pub w1: Var,
    pub w2: Var,
    pub b: Var,
}

/// Residual GCN: `R_1 = W_x X`, then `R <- elu(R + W2 elu(W1 R A + b))` per layer.
pub fn refine(tape: &mut Tape, w_x: Var, layers: &[GcnWeights], x: Var, a: Var) -> Result<Var> {
    let mut r = tape.matmul(w_x, x)?;
    for layer in layers {
        let ra = tape.matmul(r, a)?;
        let pre = affine(tape, layer.w1, ra, layer.b)?;
        let h = tape.elu(pre)?;
        let f = tape.matmul(layer.w2, h)?;
        let sum = tape.add(r, f)?;
        r = tape.elu(sum)?;
    }
    Ok(r)
}

/// Attention pooling over objects: `(x̃: d x 1, delta: 1 x N)`.
pub fn readout(tape: &mut Tape, w_delta: Var, r: Var) -> Result<(Var, Var)> {
    let scores = tape.matmul(w_delta, r)?;
    let delta = tape.softmax(scores, 1)?;
    let delta_t = tape.transpose(delta)?;
    let x = tape.matmul(r, delta_t)?;
    Ok((x, delta))
}

/// `m_t = W_m [m_prev ; x̃] + b_m`.
pub fn memory_update(tape: &mut Tape, w_m: Var, b_m: Var, m_prev: Var, x_tilde: Var) -> Result<Var> {
    let cat = tape.concat(m_prev, x_tilde, 0)?;
    affine(tape, w_m, cat, b_m)
}

/// Inputs fixed across the reasoning chain.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs {
    /// `d x N`
    pub v: Var,
    /// `d x S`
    pub l: Var,
    /// `d x 1`
    pub q: Var,
}

/// Run one LOG step.
pub fn step(tape: &mut Tape, p: &LogUnitParams, inputs: &StepInputs, state: &LogState) -> Result<(LogState, StepVars)> {
    let sp = p.steps.get(state.t).ok_or_else(|| {
        Error::Invalid(format!("step {} beyond configured depth {}", state.t + 1, p.steps.len()))
    })?;
    let sh = &p.shared;
    let [d, n] = tape.shape(inputs.v);
    let s = tape.shape(inputs.l)[1];

    let w_v = tape.param(sp.w_v);
    let b_v = tape.param(sh.b_v);
    let v_t = augment_nodes(tape, w_v, b_v, inputs.v, state.m)?;

    let cw = ControlWeights {
        w_q: tape.param(sp.w_q),
        b_q: tape.param(sp.b_q),
        w_qproj: tape.param(sp.w_qproj),
        b_qproj: tape.param(sp.b_qproj),
        head_mix: tape.param(sp.head_mix),
        w_alpha: tape.param(sp.w_alpha),
    };
    let (c, alpha, gamma) = control_signals(tape, &cw, inputs.q, state.c, inputs.l)?;

    let w_desc = tape.param(sp.w_desc);
    let descriptors = node_descriptors(tape, w_desc, inputs.v, c)?;
    let adj = adjacency(tape, descriptors)?;

    let (f, binding) = if p.binding {
        let bw = BindingWeights {
            w_vhat: tape.param(sp.w_vhat),
            b_vhat: tape.param(sh.b_vhat),
            w_z0: tape.param(sh.w_z0),
            b_z0: tape.param(sh.b_z0),
            w_z1: tape.param(sh.w_z1),
            b_z1: tape.param(sh.b_z1),
            w_bind_v: tape.param(sp.w_bind_v),
            w_bind_e: tape.param(sp.w_bind_e),
            w_beta: tape.param(sp.w_beta),
        };
        let b = language_binding(tape, &bw, inputs.v, inputs.l, state.m)?;
        (b.f, Some(b))
    } else {
        (tape.zeros(d, n), None)
    };
    let x = tape.concat(v_t, f, 0)?;

    let w_x = tape.param(sh.w_x);
    let layers: Vec<GcnWeights> = sh
        .gcn
        .iter()
        .map(|g| GcnWeights { w1: tape.param(g.w1), w2: tape.param(g.w2), b: tape.param(g.b) })
        .collect();
    let r = refine(tape, w_x, &layers, x, adj)?;

    let w_delta = tape.param(sp.w_delta);
    let (x_tilde, delta) = readout(tape, w_delta, r)?;
    let w_m = tape.param(sp.w_m);
    let b_m = tape.param(sh.b_m);
    let m = memory_update(tape, w_m, b_m, state.m, x_tilde)?;

    let vars = StepVars {
        alpha,
        gamma,
        descriptors,
        adjacency: adj,
        beta: binding.map(|b| b.beta),
        type_softmax: binding.map(|b| b.type_softmax),
        lexical_gate: binding.map(|b| b.gate),
        delta,
        x_tilde,
    };
    debug_assert_eq!(tape.shape(alpha)[1], s);
    Ok((LogState { m, c: Some(c), t: state.t + 1 }, vars))
}
