//! Model and optimizer configuration.
//!
//! Serialized as canonical JSON (fixed field order) inside checkpoints and
//! run manifests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over the unified answer space.
    #[default]
    CrossEntropy,
    /// Per-answer sigmoid with binary cross-entropy.
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension `d`.
    pub d: usize,
    /// Word embedding width.
    pub word_dim: usize,
    /// Synthetic appearance feature width.
    pub appearance_dim: usize,
    /// Reasoning steps `T`.
    pub steps: usize,
    /// Residual GCN layers `H` per step.
    pub gcn_layers: usize,
    /// Attention heads `K` of the controlling signal.
    pub heads: usize,
    /// Rows `r` of the node descriptor matrix (adjacency rank bound).
    pub descriptor_rows: usize,
    /// Lexical types `P` used by the binding gate.
    pub lexical_types: usize,
    pub max_objects: usize,
    pub max_question_len: usize,
    pub vocab_size: usize,
    pub num_answers: usize,
    pub tie_gcn: bool,
    pub tie_steps: bool,
    pub disable_binding: bool,
    pub single_head: bool,
    pub use_boxes: bool,
    pub loss: LossKind,
}

impl ModelConfig {
    /// Paper-scale defaults (d = 512, T = 8, H = 8, K = 2, N = 14).
    pub fn large(vocab_size: usize, num_answers: usize) -> Self {
        Self {
            d: 512,
            word_dim: 300,
            appearance_dim: 2048,
            steps: 8,
            gcn_layers: 8,
            heads: 2,
            descriptor_rows: 64,
            lexical_types: 3,
            max_objects: 14,
            max_question_len: 16,
            vocab_size,
            num_answers,
            tie_gcn: false,
            tie_steps: false,
            disable_binding: false,
            single_head: false,
            use_boxes: true,
            loss: LossKind::CrossEntropy,
        }
    }

    /// Desk-scale configuration used for toy training runs.
    pub fn desk(vocab_size: usize, num_answers: usize) -> Self {
        Self {
            d: 64,
            word_dim: 64,
            appearance_dim: 16,
            steps: 4,
            gcn_layers: 4,
            heads: 2,
            descriptor_rows: 8,
            lexical_types: 3,
            max_objects: 10,
            ..Self::large(vocab_size, num_answers)
        }
    }

    /// Tiny configuration for finite-difference gradient checks.
    pub fn tiny(vocab_size: usize, num_answers: usize) -> Self {
        Self {
            d: 8,
            word_dim: 8,
            appearance_dim: 16,
            steps: 2,
            gcn_layers: 2,
            heads: 2,
            descriptor_rows: 2,
            lexical_types: 2,
            ..Self::desk(vocab_size, num_answers)
        }
    }

    /// Heads actually instantiated (`single_head` forces one).
    pub fn effective_heads(&self) -> usize {
        if self.single_head {
            1
        } else {
            self.heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("word_dim", self.word_dim),
            ("appearance_dim", self.appearance_dim),
            ("steps", self.steps),
            ("gcn_layers", self.gcn_layers),
            ("heads", self.heads),
            ("descriptor_rows", self.descriptor_rows),
            ("lexical_types", self.lexical_types),
            ("max_question_len", self.max_question_len),
            ("vocab_size", self.vocab_size),
            ("num_answers", self.num_answers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d = {} must be even (two LSTM directions of d/2)", self.d)));
        }
        if self.max_objects < 2 {
            return Err(Error::Config("max_objects must be at least 2".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocabulary needs at least one token beyond PAD and UNK".into()));
        }
        Ok(())
    }
}

/// At 1e-4 the desk model stays on the answer prior for the whole
/// 30-epoch budget.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            clip_norm: 8.0,
            epochs: 30,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used for desk-scale toy runs.
    pub fn desk() -> Self {
        Self { learning_rate: DESK_LEARNING_RATE, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild and retrain a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
