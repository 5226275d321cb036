//! Full network: question encoder, object encoder, recurrent LOG steps and
//! answer head, plus batched loss/gradient evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::answer::{self, AnswerParams, BnMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::log_unit::{self, LogState, LogUnitParams, StepInputs, StepTrace, StepVars};
use crate::params::{Gradients, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, TextEncoderParams};
use crate::visual::{self, RegionFeature, VisualParams};

/// Samples per tape when a batch is split for parallel evaluation. Fixed so
/// that gradient summation order does not depend on the thread count.
pub const CHUNK: usize = 8;

/// Batch-norm variance floor in the answer head.
pub const BN_EPS: f64 = 1e-5;

/// One encoded question/scene pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Token indices; trailing PAD is ignored.
    pub tokens: Vec<usize>,
    pub regions: Vec<RegionFeature>,
    pub label: usize,
}

impl ModelInput {
    /// Same sample with objects reordered: object `j` of the result is
    /// object `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { regions: perm.iter().map(|&i| self.regions[i].clone()).collect(), ..self.clone() }
    }
}

#[derive(Debug)]
pub struct Encoded {
    /// `d x 1` fused vector.
    pub j: Var,
    pub steps: Vec<StepVars>,
    pub objects: usize,
    pub words: usize,
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
    pub stats: BatchStats,
    /// Training-mode predictions.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub logits: Vec<f64>,
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct LogNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoderParams,
    pub visual: VisualParams,
    pub log: LogUnitParams,
    pub head: AnswerParams,
}

impl LogNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let text = TextEncoderParams::register(&mut store, &mut rng, c.vocab_size, c.word_dim, c.d);
        let visual = VisualParams::register(&mut store, &mut rng, c.d, c.appearance_dim, c.max_objects, c.use_boxes);
        let log = LogUnitParams::register(&mut store, &mut rng, c);
        let head = AnswerParams::register(&mut store, &mut rng, c.d, c.num_answers);
        Ok(Self { config, store, text, visual, log, head })
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let tokens = text::strip_padding(&input.tokens);
        if tokens.len() > self.config.max_question_len {
            return Err(Error::Invalid(format!(
                "question has {} tokens, limit {}",
                tokens.len(),
                self.config.max_question_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        if input.label >= self.config.num_answers {
            return Err(Error::Invalid(format!("label {} outside {} answers", input.label, self.config.num_answers)));
        }
        Ok(())
    }

    /// Encoder and reasoning chain for one sample, up to the fused vector.
    pub fn encode(&self, tape: &mut Tape, input: &ModelInput) -> Result<Encoded> {
        self.check_input(input)?;
        let ling = text::encode_question(tape, &self.text, text::strip_padding(&input.tokens))?;
        let v = visual::encode_objects(tape, &self.visual, &input.regions)?;
        let inputs = StepInputs { v, l: ling.l, q: ling.q };
        let mut state = LogState::initial(tape, &self.log);
        let mut steps = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let (next, vars) = log_unit::step(tape, &self.log, &inputs, &state)?;
            state = next;
            steps.push(vars);
        }
        let w = tape.param(self.head.w_fuse);
        let b = tape.param(self.head.b_fuse);
        let j = answer::fuse(tape, w, b, state.m, ling.q)?;
        Ok(Encoded { j, steps, objects: input.regions.len(), words: ling.len })
    }

    /// Eval-mode logits and per-step traces for one sample.
    pub fn forward(&self, input: &ModelInput, with_traces: bool) -> Result<SampleOutput> {
        let mut tape = Tape::with_params(&self.store);
        let enc = self.encode(&mut tape, input)?;
        let (logits, _) = answer::classify(&mut tape, &self.head, enc.j, BnMode::Eval, BN_EPS)?;
        let traces = if with_traces {
            enc.steps
                .iter()
                .enumerate()
                .map(|(t, v)| StepTrace::from_tape(&tape, t + 1, v, enc.objects, enc.words))
                .collect()
        } else {
            Vec::new()
        };
        Ok(SampleOutput { logits: tape.value(logits).to_vec(), traces })
    }

    /// Eval-mode logits for many samples, in input order.
    pub fn predict_logits(&self, inputs: &[ModelInput]) -> Result<Vec<Vec<f64>>> {
        inputs.par_iter().map(|x| self.forward(x, false).map(|o| o.logits)).collect()
    }

    pub fn predict(&self, inputs: &[ModelInput]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits(inputs)?
            .into_iter()
            .map(|l| answer::argmax_columns(&Tensor::column(l))[0])
            .collect())
    }

    /// Training-mode loss of a batch on a single tape (no gradients).
    pub fn batch_loss(&self, batch: &[&ModelInput]) -> Result<f64> {
        let mut tape = Tape::with_params(&self.store);
        let mut js = Vec::with_capacity(batch.len());
        for x in batch {
            js.push(self.encode(&mut tape, x)?.j);
        }
        let mut j = js[0];
        for &next in &js[1..] {
            j = tape.concat(j, next, 1)?;
        }
        let (logits, _) = answer::classify(&mut tape, &self.head, j, BnMode::Train, BN_EPS)?;
        let labels: Vec<usize> = batch.iter().map(|x| x.label).collect();
        let loss = answer::loss(&mut tape, logits, &labels, self.config.loss)?;
        Ok(tape.scalar(loss))
    }

    /// Training-mode loss and parameter gradients of a batch. Samples are
    /// encoded on per-chunk tapes in parallel; the head runs on the stacked
    /// fused vectors and its input gradient seeds each chunk's backward pass.
    pub fn batch_gradients(&self, batch: &[&ModelInput]) -> Result<BatchOutcome> {
        if batch.len() < 2 {
            return Err(Error::Config("training batch needs at least 2 samples".into()));
        }
        let d = self.config.d;
        let mut chunks: Vec<(Tape, Vec<Var>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::with_params(&self.store);
                let js = chunk.iter().map(|x| self.encode(&mut tape, x).map(|e| e.j)).collect::<Result<Vec<_>>>()?;
                Ok((tape, js))
            })
            .collect::<Result<_>>()?;

        let mut j_all = Tensor::zeros(d, batch.len());
        let mut col = 0;
        for (tape, js) in &chunks {
            for &j in js {
                for (r, &v) in tape.value(j).iter().enumerate() {
                    j_all.set(r, col, v);
                }
                col += 1;
            }
        }

        let labels: Vec<usize> = batch.iter().map(|x| x.label).collect();
        let mut grads = Gradients::for_store(&self.store);
        let mut head_tape = Tape::with_params(&self.store);
        let j = head_tape.input(j_all);
        let (logits, stats) = answer::classify(&mut head_tape, &self.head, j, BnMode::Train, BN_EPS)?;
        let predictions = answer::argmax_columns(&head_tape.tensor(logits));
        let loss = answer::loss(&mut head_tape, logits, &labels, self.config.loss)?;
        let loss_value = head_tape.scalar(loss);
        head_tape.backward(loss)?;
        head_tape.collect_param_grads(&mut grads);
        let dj = head_tape.grad(j).ok_or_else(|| Error::Invalid("no gradient reached the fused vectors".into()))?;

        let mut offset = 0;
        let seeds: Vec<Vec<(Var, Tensor)>> = chunks
            .iter()
            .map(|(_, js)| {
                let s = js
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v, Tensor::column(dj.column_values(offset + i))))
                    .collect();
                offset += js.len();
                s
            })
            .collect();
        let partial: Vec<Gradients> = chunks
            .par_iter_mut()
            .zip(seeds.par_iter())
            .map(|((tape, _), seeds)| {
                tape.backward_seeded(seeds)?;
                let mut g = Gradients::for_store(&self.store);
                tape.collect_param_grads(&mut g);
                Ok(g)
            })
            .collect::<Result<_>>()?;
        for g in &partial {
            grads.merge(g);
        }
        Ok(BatchOutcome { loss: loss_value, grads, stats: stats.expect("train mode"), predictions })
    }

    /// L2 norm of every trainable tensor, for divergence diagnostics.
    pub fn parameter_norms(&self) -> Vec<(String, f64)> {
        self.store
            .ids()
            .filter(|&id| self.store.is_trainable(id))
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).norm_sq().sqrt()))
            .collect()
    }
}
