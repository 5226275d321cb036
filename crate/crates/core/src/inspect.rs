//! Per-step reasoning traces: JSON dumps and Graphviz renderings with
//! visual edges in red and object-word binding edges in cyan.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer::{argmax_columns, AnswerSpace};
use crate::data::{Sample, MAX_QUESTION_LEN};
use crate::error::{Error, Result};
use crate::log_unit::StepTrace;
use crate::model::LogNet;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// Edges lighter than this are left out of DOT output.
pub const DOT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Json,
    Dot,
    Both,
}

impl TraceFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "dot" => Ok(Self::Dot),
            "both" => Ok(Self::Both),
            _ => Err(Error::Invalid(format!("unknown trace format '{s}' (json, dot, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sample_id: usize,
    pub question_tokens: Vec<String>,
    pub objects: Vec<String>,
    pub answer: String,
    pub prediction: String,
    /// Mean over objects of the largest binding weight.
    pub beta_sharpness: f64,
    #[serde(flatten)]
    pub trace: StepTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub sample_id: usize,
    pub prediction: String,
    pub answer: String,
    pub logits: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

impl Inspection {
    pub fn sharpness(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.beta_sharpness).collect()
    }
}

fn describe(sample: &Sample) -> Vec<String> {
    sample
        .scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{i}: {} {} {} {}", o.size.word(), o.color.word(), o.material.word(), o.shape.word()))
        .collect()
}

/// Run one sample with tracing enabled.
pub fn inspect(
    model: &LogNet,
    sample: &Sample,
    sample_id: usize,
    vocab: &Vocabulary,
    answers: &AnswerSpace,
) -> Result<Inspection> {
    let input = crate::data::encode(std::slice::from_ref(sample), vocab, answers)?.remove(0);
    let out = model.forward(&input, true)?;
    let pred = argmax_columns(&Tensor::column(out.logits.clone()))[0];
    let prediction = answers.answer(pred).unwrap_or("?").to_string();
    let tokens: Vec<String> = sample.question_tokens.iter().take(MAX_QUESTION_LEN).cloned().collect();
    let objects = describe(sample);
    let steps = out
        .traces
        .into_iter()
        .map(|trace| StepRecord {
            sample_id,
            question_tokens: tokens.clone(),
            objects: objects.clone(),
            answer: sample.answer.clone(),
            prediction: prediction.clone(),
            beta_sharpness: trace.binding_sharpness(),
            trace,
        })
        .collect();
    Ok(Inspection { sample_id, prediction, answer: sample.answer.clone(), logits: out.logits, steps })
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Graphviz rendering of one step.
pub fn to_dot(step: &StepRecord) -> String {
    let t = &step.trace;
    let n = t.adjacency.rows();
    let mut s = String::new();
    let _ = writeln!(s, "graph step{} {{", t.step);
    let _ = writeln!(s, "  label={};", quote(&format!("step {}: {}", t.step, step.question_tokens.join(" "))));
    let _ = writeln!(s, "  node [fontname=\"Helvetica\"];");
    for (i, name) in step.objects.iter().enumerate().take(n) {
        let _ = writeln!(s, "  o{i} [shape=box, label={}];", quote(name));
    }
    for (k, w) in step.question_tokens.iter().enumerate().take(t.beta.cols()) {
        let _ = writeln!(s, "  w{k} [shape=ellipse, label={}];", quote(w));
    }
    for i in 0..n {
        for j in i + 1..n {
            let a = t.adjacency.get(i, j);
            if a >= DOT_THRESHOLD {
                let _ = writeln!(s, "  o{i} -- o{j} [color=red, penwidth={:.2}, label=\"{a:.2}\"];", 1.0 + 4.0 * a);
            }
        }
    }
    for i in 0..t.beta.rows() {
        for k in 0..t.beta.cols() {
            let b = t.beta.get(i, k);
            if b >= DOT_THRESHOLD {
                let _ = writeln!(s, "  o{i} -- w{k} [color=cyan, penwidth={:.2}, label=\"{b:.2}\"];", 1.0 + 4.0 * b);
            }
        }
    }
    s.push_str("}\n");
    s
}

/// Write one file per step (and per format). Returns the paths written.
pub fn write_traces(dir: &Path, inspection: &Inspection, format: TraceFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for step in &inspection.steps {
        let stem = format!("sample{}_step{}", inspection.sample_id, step.trace.step);
        if matches!(format, TraceFormat::Json | TraceFormat::Both) {
            let p = dir.join(format!("{stem}.json"));
            std::fs::write(&p, serde_json::to_string_pretty(step)?)?;
            paths.push(p);
        }
        if matches!(format, TraceFormat::Dot | TraceFormat::Both) {
            let p = dir.join(format!("{stem}.dot"));
            std::fs::write(&p, to_dot(step))?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Mean sharpness per step across many inspections.
pub fn mean_sharpness(inspections: &[Inspection]) -> Vec<f64> {
    let Some(first) = inspections.first() else { return Vec::new() };
    let steps = first.steps.len();
    (0..steps)
        .map(|t| inspections.iter().map(|x| x.steps[t].beta_sharpness).sum::<f64>() / inspections.len() as f64)
        .collect()
}
