//! Finite-difference verification of the full model's parameter gradients.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{LogNet, ModelInput};
use crate::params::ParamId;
use crate::visual::RegionFeature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub objects: usize,
    pub words: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// gradient is at round-off level are judged by absolute error.
    pub abs_floor: f64,
    /// Test fixture: scale the analytic gradient of this group by 1.1.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: 3,
            words: 4,
            batch: 3,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            corrupt_group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_grad: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: ModelConfig,
    pub groups: Vec<GroupResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// Tiny configuration: d=8, T=2, H=2, K=2, r=2, P=2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny(10, 5)
}

fn random_inputs(rng: &mut ChaCha8Rng, cfg: &ModelConfig, opts: &GradcheckOptions) -> Vec<ModelInput> {
    (0..opts.batch)
        .map(|_| ModelInput {
            tokens: (0..opts.words).map(|_| rng.random_range(2..cfg.vocab_size)).collect(),
            regions: (0..opts.objects)
                .map(|_| {
                    let x = rng.random_range(0.0..0.6);
                    let y = rng.random_range(0.0..0.6);
                    RegionFeature {
                        appearance: (0..cfg.appearance_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        bbox: [x, y, x + 0.3, y + 0.3],
                    }
                })
                .collect(),
            label: rng.random_range(0..cfg.num_answers),
        })
        .collect()
}

/// Compare analytic and central-difference gradients for every trainable
/// tensor. Relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn gradcheck(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = LogNet::new(cfg.clone(), opts.seed)?;
    // Perturb the zero-initialized tensors so every path carries signal.
    let ids: Vec<ParamId> = net.store.ids().filter(|&id| net.store.is_trainable(id)).collect();
    for &id in &ids {
        for v in net.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let inputs = random_inputs(&mut rng, cfg, opts);
    let batch: Vec<&ModelInput> = inputs.iter().collect();
    let analytic = net.batch_gradients(&batch)?.grads;

    let mut groups = Vec::with_capacity(ids.len());
    for &id in &ids {
        let name = net.store.name(id).to_string();
        let size = net.store.get(id).len();
        let zeros = vec![0.0; size];
        let mut a: Vec<f64> = analytic.get(id).map_or(zeros, <[f64]>::to_vec);
        if opts.corrupt_group.as_deref() == Some(name.as_str()) {
            a.iter_mut().for_each(|g| *g *= 1.1);
        }
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        let max_grad = a.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for k in 0..size {
            let orig = net.store.get(id).data()[k];
            net.store.get_mut(id).data_mut()[k] = orig + opts.step;
            let plus = net.batch_loss(&batch)?;
            net.store.get_mut(id).data_mut()[k] = orig - opts.step;
            let minus = net.batch_loss(&batch)?;
            net.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (a[k] - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a[k].abs().max(numeric.abs()).max(opts.abs_floor));
        }
        groups.push(GroupResult { name, size, max_rel_error: max_rel, max_abs_error: max_abs, max_grad, passed: max_rel < opts.tolerance });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        config: cfg.clone(),
        passed: groups.iter().all(|g| g.passed),
        groups,
        max_rel_error,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}
