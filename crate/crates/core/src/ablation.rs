//! Ablation sweeps: architecture variants and training-set fractions,
//! repeated over seeds, with ordering verdicts on the seed means.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::LogNet;
use crate::train::{Split, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Variant {
    Default,
    SingleHead,
    NoBinding,
    Steps(usize),
    /// Fraction of the training split, taken as a prefix.
    Fraction(f64),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Default => "default".into(),
            Variant::SingleHead => "single-head".into(),
            Variant::NoBinding => "no-binding".into(),
            Variant::Steps(t) => format!("T={t}"),
            Variant::Fraction(f) => format!("data={:.0}%", f * 100.0),
        }
    }

    /// Run configuration and training-set size for this variant.
    pub fn apply(&self, base: &RunConfig, train_len: usize) -> (RunConfig, usize) {
        let mut run = base.clone();
        let mut n = train_len;
        match *self {
            Variant::Default => {}
            Variant::SingleHead => run.model.single_head = true,
            Variant::NoBinding => run.model.disable_binding = true,
            Variant::Steps(t) => run.model.steps = t,
            Variant::Fraction(f) => n = ((train_len as f64 * f).round() as usize).clamp(2, train_len),
        }
        (run, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub variants: Vec<Variant>,
}

impl AblationPlan {
    /// Every variant: default, single head, no binding, T in {1, 4, 8, 12},
    /// and the {10, 25, 50, 100}% data sweep.
    pub fn full(base: RunConfig, seeds: Vec<u64>, epochs: usize) -> Self {
        let mut variants = vec![Variant::Default, Variant::SingleHead, Variant::NoBinding];
        variants.extend([1, 4, 8, 12].map(Variant::Steps));
        variants.extend([0.1, 0.25, 0.5, 1.0].map(Variant::Fraction));
        Self { base, seeds, epochs, variants }
    }

    /// The variants the trend verdicts need and nothing else.
    pub fn trends(base: RunConfig, seeds: Vec<u64>, epochs: usize) -> Self {
        let mut variants = vec![Variant::Default, Variant::NoBinding, Variant::Steps(1)];
        variants.extend([0.1, 0.25, 0.5].map(Variant::Fraction));
        Self { base, seeds, epochs, variants }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_size: usize,
    /// Best validation accuracy over the run.
    pub val_accuracy: f64,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<Summary>,
    pub verdicts: Vec<Verdict>,
    /// Set when a sub-run failed; the rows gathered so far are kept.
    pub aborted: Option<String>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.aborted.is_none() && self.verdicts.iter().all(|v| v.holds)
    }

    pub fn mean(&self, label: &str) -> Option<f64> {
        self.summaries.iter().find(|s| s.label == label).map(|s| s.mean)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| configuration | runs | val accuracy |\n|---|---|---|\n");
        for m in &self.summaries {
            let _ = writeln!(s, "| {} | {} | {:.2} ± {:.2} % |", m.label, m.runs, 100.0 * m.mean, 100.0 * m.sd);
        }
        s.push_str("\n| trend | verdict | detail |\n|---|---|---|\n");
        for v in &self.verdicts {
            let _ = writeln!(s, "| {} | {} | {} |", v.name, if v.holds { "pass" } else { "FAIL" }, v.detail);
        }
        if let Some(e) = &self.aborted {
            let _ = writeln!(s, "\naborted: {e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "seed", "epochs", "train_size", "val_accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                r.epochs.to_string(),
                r.train_size.to_string(),
                format!("{:.6}", r.val_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn summarize(rows: &[AblationRow]) -> Vec<Summary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.val_accuracy).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Summary { label: label.to_string(), runs: xs.len(), mean, sd }
        })
        .collect()
}

/// Ordering checks on seed means. Only checks whose configurations were
/// run are emitted.
pub fn verdicts(summaries: &[Summary]) -> Vec<Verdict> {
    let mean = |l: &str| summaries.iter().find(|s| s.label == l).map(|s| s.mean);
    let default = mean("default");
    let mut out = Vec::new();
    // The default run doubles as its own step count and as the 100% fraction.
    let steps_mean = |t: usize| mean(&format!("T={t}"));
    if let (Some(a), Some(b)) = (steps_mean(1), steps_mean(4).or(default)) {
        out.push(Verdict { name: "T=1 < T=4".into(), holds: a < b, detail: format!("{a:.4} vs {b:.4}") });
    }
    if let (Some(a), Some(b)) = (mean("no-binding"), default) {
        out.push(Verdict { name: "no-binding <= default".into(), holds: a <= b, detail: format!("{a:.4} vs {b:.4}") });
    }
    let mut curve: Vec<(f64, f64)> = summaries
        .iter()
        .filter_map(|s| {
            let pct = s.label.strip_prefix("data=")?.strip_suffix('%')?.parse::<f64>().ok()?;
            Some((pct, s.mean))
        })
        .collect();
    if !curve.is_empty() {
        if !curve.iter().any(|&(p, _)| p == 100.0) {
            if let Some(d) = default {
                curve.push((100.0, d));
            }
        }
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        let holds = curve.windows(2).all(|w| w[0].1 <= w[1].1);
        let detail = curve.iter().map(|(p, m)| format!("{p:.0}%:{m:.4}")).collect::<Vec<_>>().join(" ");
        out.push(Verdict { name: "accuracy non-decreasing in data".into(), holds, detail });
    }
    out
}

/// Train one configuration and return its best validation accuracy.
pub fn run_one(run: &RunConfig, seed: u64, epochs: usize, train: &Split, val: &Split) -> Result<f64> {
    let mut run = run.clone();
    run.train.seed = seed;
    let model = LogNet::new(run.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, run.train.clone())?;
    for _ in 0..epochs {
        trainer.run_epoch(train, Some(val), &mut |_, _| {})?;
    }
    trainer.state.best_val.ok_or_else(|| Error::Invalid("empty validation split".into()))
}

/// Run every variant for every seed. Identical (configuration, data size)
/// pairs are trained once and reported under each label.
pub fn run_ablations(
    plan: &AblationPlan,
    train: &Split,
    val: &Split,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<AblationReport> {
    if plan.seeds.is_empty() || plan.variants.is_empty() || plan.epochs == 0 {
        return Err(Error::Invalid("ablation plan needs seeds, variants and at least one epoch".into()));
    }
    plan.base.validate()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut done: Vec<(String, usize, u64, f64)> = Vec::new();
    let mut aborted = None;
    'outer: for variant in &plan.variants {
        let (run, n) = variant.apply(&plan.base, train.len());
        let key = run.to_canonical_json()?;
        for &seed in &plan.seeds {
            let cached = done.iter().find(|(k, m, s, _)| *k == key && *m == n && *s == seed).map(|d| d.3);
            let acc = match cached {
                Some(a) => a,
                None => match run_one(&run, seed, plan.epochs, &train.prefix(n), val) {
                    Ok(a) => a,
                    Err(e) => {
                        aborted = Some(format!("{} seed {seed}: {e}", variant.label()));
                        break 'outer;
                    }
                },
            };
            done.push((key.clone(), n, seed, acc));
            let mut resolved = run.clone();
            resolved.train.seed = seed;
            let manifest = RunManifest::new(
                "ablate",
                &serde_json::json!({ "run": resolved, "epochs": plan.epochs, "train_size": n, "variant": variant }),
                seed,
            )?;
            let row = AblationRow { label: variant.label(), seed, epochs: plan.epochs, train_size: n, val_accuracy: acc, manifest };
            on_row(&row);
            rows.push(row);
        }
    }
    let summaries = summarize(&rows);
    let verdicts = verdicts(&summaries);
    Ok(AblationReport { rows, summaries, verdicts, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(label: &str, mean: f64) -> Summary {
        Summary { label: label.into(), runs: 3, mean, sd: 0.0 }
    }

    #[test]
    fn summary_statistics() {
        let m = RunManifest::new("ablate", &0, 0).unwrap();
        let rows: Vec<AblationRow> = [0.5, 0.7, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &a)| AblationRow {
                label: "x".into(),
                seed: i as u64,
                epochs: 1,
                train_size: 10,
                val_accuracy: a,
                manifest: m.clone(),
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.6).abs() < 1e-12);
        assert!((s[0].sd - 0.1).abs() < 1e-12);
    }

    #[test]
    fn verdict_orderings() {
        let s = vec![
            summary("default", 0.8),
            summary("T=1", 0.6),
            summary("no-binding", 0.8),
            summary("data=10%", 0.5),
            summary("data=50%", 0.7),
        ];
        let v = verdicts(&s);
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|v| v.holds), "{v:?}");
        assert!(v[2].detail.ends_with("100%:0.8000"));

        let s = vec![summary("default", 0.8), summary("T=1", 0.8), summary("data=50%", 0.85)];
        let v = verdicts(&s);
        assert!(!v[0].holds, "ties are not a strict improvement");
        assert!(!v[1].holds);
    }

    #[test]
    fn variants_map_onto_config() {
        let base = RunConfig {
            model: crate::config::ModelConfig::tiny(10, 4),
            train: crate::config::TrainConfig::default(),
        };
        assert!(Variant::NoBinding.apply(&base, 100).0.model.disable_binding);
        assert!(Variant::SingleHead.apply(&base, 100).0.model.single_head);
        assert_eq!(Variant::Steps(12).apply(&base, 100).0.model.steps, 12);
        assert_eq!(Variant::Fraction(0.25).apply(&base, 100).1, 25);
        assert_eq!(Variant::Fraction(0.25).label(), "data=25%");
        assert_eq!(Variant::Default.apply(&base, 100), (base, 100));
    }
}
