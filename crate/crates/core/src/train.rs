//! Optimization loop, evaluation and metric logging.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{BatchOutcome, LogNet, ModelInput};
use crate::params::{Gradients, ParamStore};
use crate::tape::log_sum_exp;

/// Adam with bias correction. Moments are kept for every stored tensor;
/// buffers simply never receive updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    #[serde(rename = "type")]
    pub qtype: String,
    pub accuracy: f64,
    /// Absent for per-type training rows (only batch means are known).
    pub loss: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub correct: usize,
    pub total: usize,
    /// Summed per-sample loss, when known.
    pub loss_sum: Option<f64>,
}

impl TypeScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: TypeScore,
    pub loss: f64,
    pub per_type: BTreeMap<String, TypeScore>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn rows(&self, epoch: usize, split: &str) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow {
            epoch,
            split: split.into(),
            qtype: "all".into(),
            accuracy: self.accuracy(),
            loss: Some(self.loss),
        }];
        rows.extend(self.per_type.iter().map(|(t, s)| MetricRow {
            epoch,
            split: split.into(),
            qtype: t.clone(),
            accuracy: s.accuracy(),
            loss: s.loss_sum.map(|l| l / s.total as f64),
        }));
        rows
    }
}

fn sample_loss(logits: &[f64], label: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => log_sum_exp(logits) - logits[label],
        LossKind::BinaryCrossEntropy => logits
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let t = if k == label { 1.0 } else { 0.0 };
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum(),
    }
}

/// Eval-mode accuracy and loss, broken down by the question type tags.
pub fn evaluate(model: &LogNet, inputs: &[ModelInput], types: &[String]) -> Result<EvalReport> {
    if inputs.len() != types.len() {
        return Err(Error::Invalid(format!("{} samples but {} type tags", inputs.len(), types.len())));
    }
    let logits = model.predict_logits(inputs)?;
    let mut overall = TypeScore::default();
    let mut per_type: BTreeMap<String, TypeScore> = BTreeMap::new();
    let mut loss = 0.0;
    for ((x, l), t) in inputs.iter().zip(&logits).zip(types) {
        let pred = crate::answer::argmax_columns(&crate::tensor::Tensor::column(l.clone()))[0];
        let hit = usize::from(pred == x.label);
        let sl = sample_loss(l, x.label, model.config.loss);
        loss += sl;
        overall.correct += hit;
        overall.total += 1;
        let e = per_type.entry(t.clone()).or_default();
        e.correct += hit;
        e.total += 1;
        *e.loss_sum.get_or_insert(0.0) += sl;
    }
    if !inputs.is_empty() {
        loss /= inputs.len() as f64;
    }
    Ok(EvalReport { overall, loss, per_type })
}

/// A labelled split ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Split {
    pub inputs: Vec<ModelInput>,
    pub types: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// First `n` samples.
    pub fn prefix(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split { inputs: self.inputs[..n].to_vec(), types: self.types[..n].to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: LogNet,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub state: TrainState,
    /// Parameters at the best validation accuracy so far.
    pub best: Option<ParamStore>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

impl Trainer {
    pub fn new(model: LogNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.store);
        Ok(Self { model, optimizer, config, state: TrainState::default(), best: None })
    }

    /// Sample order for an epoch, a pure function of the seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn divergence(&self, batch: usize, what: &str) -> Error {
        let mut norms = self.model.parameter_norms();
        norms.sort_by(|a, b| b.1.total_cmp(&a.1));
        let report: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.3e}")).collect();
        Error::Diverged(format!(
            "{what} at epoch {} batch {batch} (step {}); largest parameter norms: {}",
            self.state.epoch + 1,
            self.state.step,
            report.join(", ")
        ))
    }

    /// One optimizer step on `batch`. Returns the batch outcome before the update.
    pub fn step(&mut self, batch: &[&ModelInput], batch_id: usize) -> Result<BatchOutcome> {
        let mut out = match self.model.batch_gradients(batch) {
            Ok(o) => o,
            Err(Error::NonFinite { op }) => return Err(self.divergence(batch_id, &format!("non-finite {op}"))),
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() || !out.grads.all_finite() {
            return Err(self.divergence(batch_id, "non-finite loss or gradient"));
        }
        clip_global_norm(&mut out.grads, self.config.clip_norm);
        self.optimizer.step(&mut self.model.store, &out.grads, &self.config);
        self.model.head.update_running_stats(&mut self.model.store, &out.stats, self.config.bn_momentum);
        self.state.step += 1;
        Ok(out)
    }

    /// One pass over `train`, then validation. `on_step` sees every batch loss.
    pub fn run_epoch(
        &mut self,
        train: &Split,
        val: Option<&Split>,
        on_step: &mut dyn FnMut(u64, f64),
    ) -> Result<EpochSummary> {
        if train.len() < 2 {
            return Err(Error::Invalid("training split needs at least 2 samples".into()));
        }
        let epoch = self.state.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut per_type: BTreeMap<String, TypeScore> = BTreeMap::new();
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&ModelInput> = idx.iter().map(|&i| &train.inputs[i]).collect();
            let out = self.step(&batch, b)?;
            on_step(self.state.step, out.loss);
            loss_sum += out.loss * idx.len() as f64;
            seen += idx.len();
            for (&i, &p) in idx.iter().zip(&out.predictions) {
                let hit = usize::from(p == train.inputs[i].label);
                correct += hit;
                let e = per_type.entry(train.types[i].clone()).or_default();
                e.correct += hit;
                e.total += 1;
            }
        }
        let train_report = EvalReport {
            overall: TypeScore { correct, total: seen, loss_sum: None },
            loss: loss_sum / seen as f64,
            per_type,
        };
        self.state.epoch = epoch;
        self.state.metrics.extend(train_report.rows(epoch, "train"));

        let val_accuracy = match val {
            Some(v) if !v.is_empty() => {
                let report = evaluate(&self.model, &v.inputs, &v.types)?;
                self.state.metrics.extend(report.rows(epoch, "val"));
                let acc = report.accuracy();
                if self.state.best_val.is_none_or(|b| acc > b) {
                    self.state.best_val = Some(acc);
                    self.state.best_epoch = Some(epoch);
                    self.best = Some(self.model.store.clone());
                }
                Some(acc)
            }
            _ => None,
        };
        Ok(EpochSummary {
            epoch,
            train_loss: train_report.loss,
            train_accuracy: train_report.accuracy(),
            val_accuracy,
        })
    }

    /// Model with the best validation parameters (or the current ones).
    pub fn best_model(&self) -> LogNet {
        let mut m = self.model.clone();
        if let Some(store) = &self.best {
            m.store = store.clone();
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::column(vec![1.0, -2.0, 0.5]));
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(id, &[0.3, -4.0, 1e-3]);
        let mut adam = Adam::new(&store);
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        adam.step(&mut store, &grads, &cfg);
        let w = store.get(id).data();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((w[1] + 1.99).abs() < 1e-7);
        assert!((w[2] - 0.49).abs() < 1e-4);
    }

    #[test]
    fn adam_skips_buffers() {
        let mut store = ParamStore::new();
        let b = store.add_buffer("running", Tensor::column(vec![1.0]));
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(b, &[5.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, &TrainConfig::default());
        assert_eq!(store.get(b).data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::column(vec![0.0, 0.0]));
        let mut g = Gradients::for_store(&store);
        g.accumulate(id, &[30.0, 40.0]);
        assert_eq!(clip_global_norm(&mut g, 8.0), 50.0);
        assert!((g.global_norm() - 8.0).abs() < 1e-12);
        let mut small = Gradients::for_store(&store);
        small.accumulate(id, &[0.3, 0.4]);
        clip_global_norm(&mut small, 8.0);
        assert_eq!(small.get(id).unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricRow { epoch: 1, split: "train".into(), qtype: "all".into(), accuracy: 0.5, loss: Some(1.25) },
            MetricRow { epoch: 1, split: "val".into(), qtype: "count".into(), accuracy: 0.25, loss: None },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,split,type,accuracy,loss\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn per_sample_loss_closed_forms() {
        assert!((sample_loss(&[0.0; 4], 2, LossKind::CrossEntropy) - 4f64.ln()).abs() < 1e-15);
        assert!((sample_loss(&[0.0; 2], 0, LossKind::BinaryCrossEntropy) - 2.0 * 2f64.ln()).abs() < 1e-15);
    }
}
