use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lognet::ablation::{self, AblationPlan};
use lognet::checkpoint::Checkpoint;
use lognet::config::{ModelConfig, RunConfig, TrainConfig};
use lognet::data::{self, Audit, DataConfig, Family, Sample, Split};
use lognet::error::ErrorClass;
use lognet::gradcheck::{self, GradcheckOptions};
use lognet::inspect::{self, TraceFormat};
use lognet::manifest::RunManifest;
use lognet::model::LogNet;
use lognet::train::{self, Trainer};
use lognet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lognet", version, about = "Object-graph reasoning with language binding on a toy VQA task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test JSONL splits plus an answer audit.
    GenerateData(GenerateArgs),
    /// Train a model (or a sweep over --steps).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Dump per-step reasoning traces for one sample.
    Inspect(InspectArgs),
    /// Run the ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "LOGNET_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    /// Object count range, e.g. 4-10.
    #[arg(long, default_value = "4-10")]
    n_objects: String,
    /// Question families to include.
    #[arg(long, value_delimiter = ',', default_value = "query,exist,count,compare,spatial")]
    templates: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// JSON run configuration (partial files are merged over defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model size: desk, tiny or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = "LOGNET_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    disable_binding: bool,
    #[arg(long)]
    single_head: bool,
    #[arg(long)]
    tie_gcn: bool,
    #[arg(long)]
    tie_steps: bool,
    #[arg(long)]
    no_boxes: bool,
    /// Use per-answer binary cross-entropy instead of softmax cross-entropy.
    #[arg(long)]
    bce: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory produced by generate-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Reasoning steps; several values run a sweep into out/T<n>.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Continue from a checkpoint (normally out/last.logk).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or a JSONL file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Write eval.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, env = "LOGNET_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, value_delimiter = ',', required = true)]
    sample_id: Vec<usize>,
    #[arg(long, default_value = "both")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// full: every variant; trends: only what the verdicts need.
    #[arg(long, default_value = "full")]
    protocol: String,
    #[arg(long)]
    train_limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 1,
        ErrorClass::Numeric => 2,
        ErrorClass::Io => 3,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_context(path, e))
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("--n-objects expects MIN-MAX or N, got '{s}'"));
    match s.split_once('-') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let (min_objects, max_objects) = parse_range(&a.n_objects)?;
    let families = a.templates.iter().map(|t| Family::parse(t.trim())).collect::<Result<Vec<_>>>()?;
    let cfg = DataConfig { seed: a.seed, train: a.train, val: a.val, test: a.test, min_objects, max_objects, families };
    cfg.validate()?;
    if cfg.train < 2 {
        return Err(Error::Invalid("--train must be at least 2".into()));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("generate-data", &cfg, cfg.seed)?;
    let mut audits = serde_json::Map::new();
    for split in Split::ALL {
        let samples = data::generate_split(&cfg, split)?;
        let path = a.out.join(format!("{}.jsonl", split.name()));
        data::write_jsonl(&path, &samples).map_err(|e| match e {
            Error::Io(io) => io_context(&path, io),
            e => e,
        })?;
        let audit = Audit::of(&samples);
        if !samples.is_empty() {
            println!(
                "{:5}  {:6} samples  majority '{}' {:.1}%  {}",
                split.name(),
                audit.total,
                audit.majority_answer,
                100.0 * audit.majority_rate,
                if audit.passes() { "audit ok" } else { "AUDIT FAILED" }
            );
        }
        audits.insert(split.name().into(), serde_json::to_value(&audit)?);
        manifest = manifest.output(&path);
    }
    let audit_path = a.out.join("audit.json");
    std::fs::write(&audit_path, serde_json::to_string_pretty(&audits)? + "\n")?;
    std::fs::write(a.out.join("dataset.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    manifest.output(&audit_path).output(a.out.join("dataset.json")).save(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    data::read_jsonl(path).map_err(|e| match e {
        Error::Io(io) => io_context(path, io),
        e => e,
    })
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Built-in defaults, then the config file, then flags.
fn resolve_config(flags: &ModelFlags) -> Result<RunConfig> {
    let (vocab, answers) = (data::vocabulary().len(), data::answer_space().len());
    let model = match flags.preset.as_deref().unwrap_or("desk") {
        "desk" => ModelConfig::desk(vocab, answers),
        "tiny" => ModelConfig::tiny(vocab, answers),
        "large" => ModelConfig::large(vocab, answers),
        p => return Err(Error::Invalid(format!("unknown preset '{p}' (desk, tiny, large)"))),
    };
    let mut value = serde_json::to_value(RunConfig { model, train: TrainConfig::desk() })?;
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_context(path, e))?;
        let file: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    let mut run: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("merged configuration: {e}")))?;
    let (m, t) = (&mut run.model, &mut run.train);
    if let Some(e) = flags.epochs {
        t.epochs = e;
    }
    if let Some(s) = flags.seed {
        t.seed = s;
    }
    if let Some(lr) = flags.lr {
        t.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    if let Some(d) = flags.dim {
        m.d = d;
        m.word_dim = d;
    }
    m.disable_binding |= flags.disable_binding;
    m.single_head |= flags.single_head;
    m.tie_gcn |= flags.tie_gcn;
    m.tie_steps |= flags.tie_steps;
    if flags.no_boxes {
        m.use_boxes = false;
    }
    if flags.bce {
        m.loss = lognet::config::LossKind::BinaryCrossEntropy;
    }
    if m.vocab_size != vocab || m.num_answers != answers {
        return Err(Error::Config(format!(
            "configuration expects vocabulary {} and {} answers but the dataset has {vocab} and {answers}; \
             drop vocab_size/num_answers from the config file",
            m.vocab_size, m.num_answers
        )));
    }
    run.validate()?;
    Ok(run)
}

fn check_dataset(samples: &[Sample], cfg: &ModelConfig, what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.scene.objects.len() > cfg.max_objects {
            return Err(Error::Invalid(format!(
                "{what} sample {i} has {} objects but the model allows {}; raise max_objects in the config",
                s.scene.objects.len(),
                cfg.max_objects
            )));
        }
    }
    Ok(())
}

fn to_split(samples: &[Sample]) -> Result<train::Split> {
    Ok(train::Split {
        inputs: data::encode(samples, &data::vocabulary(), &data::answer_space())?,
        types: samples.iter().map(|s| s.family.name().to_string()).collect(),
    })
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let train_path = split_path(&a.data, "train");
    let val_path = split_path(&a.data, "val");
    let mut train_samples = load_samples(&train_path)?;
    if let Some(n) = a.train_limit {
        train_samples.truncate(n);
    }
    let val_samples = load_samples(&val_path)?;
    let base = match &a.resume {
        Some(p) => Checkpoint::load(p)?.run,
        None => resolve_config(&a.model)?,
    };
    let sweep: Vec<Option<usize>> = if a.steps.is_empty() { vec![None] } else { a.steps.iter().map(|&t| Some(t)).collect() };
    if a.resume.is_some() && sweep.len() > 1 {
        return Err(Error::Invalid("--resume continues a single run; drop the --steps sweep".into()));
    }
    let train_split = to_split(&train_samples)?;
    let val_split = to_split(&val_samples)?;
    for steps in sweep {
        let mut run = base.clone();
        if let Some(t) = steps {
            run.model.steps = t;
        }
        if let (Some(_), Some(e)) = (&a.resume, a.model.epochs) {
            run.train.epochs = e;
        }
        run.validate()?;
        check_dataset(&train_samples, &run.model, "train")?;
        check_dataset(&val_samples, &run.model, "val")?;
        let out = if steps.is_some() && a.steps.len() > 1 { a.out.join(format!("T{}", run.model.steps)) } else { a.out.clone() };
        create_dir(&out)?;
        let mut trainer = match &a.resume {
            Some(p) => {
                let mut t = Checkpoint::load(p)?.trainer()?;
                t.config.epochs = run.train.epochs;
                t
            }
            None => Trainer::new(LogNet::new(run.model.clone(), run.train.seed)?, run.train.clone())?,
        };
        println!("run T={} d={} lr={} epochs={} seed={} -> {}", run.model.steps, run.model.d, run.train.learning_rate, run.train.epochs, run.train.seed, out.display());
        println!("{:>5} {:>10} {:>9} {:>9} {:>8}", "epoch", "train loss", "train acc", "val acc", "secs");
        let (vocab, answers) = (data::vocabulary(), data::answer_space());
        while trainer.state.epoch < run.train.epochs {
            let start = Instant::now();
            let s = trainer.run_epoch(&train_split, Some(&val_split), &mut |_, _| {})?;
            println!(
                "{:>5} {:>10.4} {:>9.4} {:>9.4} {:>8.1}",
                s.epoch,
                s.train_loss,
                s.train_accuracy,
                s.val_accuracy.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            train::write_metrics_csv(&out.join("metrics.csv"), &trainer.state.metrics)?;
            Checkpoint::from_trainer(&trainer, &vocab, &answers).save(&out.join("last.logk"))?;
            if trainer.state.best_epoch == Some(s.epoch) {
                Checkpoint::best_of(&trainer, &vocab, &answers).save(&out.join("model.logk"))?;
            }
        }
        println!(
            "best val {:.4} at epoch {}",
            trainer.state.best_val.unwrap_or(f64::NAN),
            trainer.state.best_epoch.map_or("-".into(), |e| e.to_string())
        );
        let mut resolved = run.clone();
        resolved.train.epochs = trainer.config.epochs;
        let mut manifest = RunManifest::new("train", &resolved, resolved.train.seed)?.input(&train_path).input(&val_path);
        if let Some(p) = &a.resume {
            manifest = manifest.input(p);
        }
        manifest
            .output(out.join("model.logk"))
            .output(out.join("last.logk"))
            .output(out.join("metrics.csv"))
            .save(&out.join("manifest.json"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let path = split_path(&a.data, &a.split);
    let samples = load_samples(&path)?;
    let vocab = ckpt.vocabulary()?;
    let answers = ckpt.answer_space()?;
    if vocab != data::vocabulary() || answers != data::answer_space() {
        return Err(Error::Invalid("checkpoint vocabulary or answer space differs from the dataset's".into()));
    }
    let model = ckpt.model()?;
    check_dataset(&samples, &model.config, "eval")?;
    let inputs = data::encode(&samples, &vocab, &answers)?;
    let types: Vec<String> = samples.iter().map(|s| s.family.name().to_string()).collect();
    let report = train::evaluate(&model, &inputs, &types)?;
    let reference_path = split_path(&a.data, "train");
    let reference = if a.data.is_dir() && reference_path.exists() { load_samples(&reference_path)? } else { samples.clone() };
    let baseline = Audit::majority_baseline(&reference, &samples);
    println!("{:10} {:>7} {:>9}", "type", "n", "accuracy");
    for (t, s) in &report.per_type {
        println!("{:10} {:>7} {:>9.4}", t, s.total, s.accuracy());
    }
    println!("{:10} {:>7} {:>9.4}", "all", report.overall.total, report.accuracy());
    println!("loss {:.4}  majority baseline {:.4}", report.loss, baseline);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let body = serde_json::json!({ "report": report, "majority_baseline": baseline });
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&body)? + "\n")?;
        RunManifest::new("eval", &ckpt.run, ckpt.run.train.seed)?
            .input(&a.checkpoint)
            .input(&path)
            .output(out.join("eval.json"))
            .save(&out.join("manifest.json"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = GradcheckOptions { seed: a.seed, ..Default::default() };
    let cfg = gradcheck::tiny_config();
    let report = gradcheck::gradcheck(&cfg, &opts)?;
    println!("{:28} {:>6} {:>11} {:>11} {:>6}", "group", "size", "rel error", "abs error", "ok");
    for g in &report.groups {
        println!("{:28} {:>6} {:>11.3e} {:>11.3e} {:>6}", g.name, g.size, g.max_rel_error, g.max_abs_error, if g.passed { "yes" } else { "NO" });
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) in {:.1}s: {}",
        report.max_rel_error,
        report.tolerance,
        report.seconds,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        create_dir(out)?;
        std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        RunManifest::new("gradcheck", &serde_json::json!({ "model": cfg, "options": opts }), a.seed)?
            .output(out.join("gradcheck.json"))
            .save(&out.join("manifest.json"))?;
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn inspect_cmd(a: InspectArgs) -> Result<ExitCode> {
    let format = TraceFormat::parse(&a.format)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let (vocab, answers) = (ckpt.vocabulary()?, ckpt.answer_space()?);
    let path = split_path(&a.data, &a.split);
    let samples = load_samples(&path)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("inspect", &serde_json::json!({ "run": ckpt.run, "format": format, "sample_ids": a.sample_id }), ckpt.run.train.seed)?
        .input(&a.checkpoint)
        .input(&path);
    let mut all = Vec::new();
    for &id in &a.sample_id {
        let sample = samples
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("sample id {id} out of range ({} samples in {})", samples.len(), path.display())))?;
        let ins = inspect::inspect(&model, sample, id, &vocab, &answers)?;
        for p in inspect::write_traces(&a.out, &ins, format)? {
            manifest = manifest.output(p);
        }
        let sharp: Vec<String> = ins.sharpness().iter().map(|s| format!("{s:.3}")).collect();
        println!(
            "sample {id}: {}  answer '{}' predicted '{}'  binding sharpness per step [{}]",
            sample.question_text,
            ins.answer,
            ins.prediction,
            sharp.join(", ")
        );
        all.push(ins);
    }
    if all.len() > 1 {
        let mean: Vec<String> = inspect::mean_sharpness(&all).iter().map(|s| format!("{s:.3}")).collect();
        println!("mean binding sharpness per step [{}]", mean.join(", "));
    }
    manifest.save(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: AblateArgs) -> Result<ExitCode> {
    let train_path = split_path(&a.data, "train");
    let val_path = split_path(&a.data, "val");
    let mut train_samples = load_samples(&train_path)?;
    if let Some(n) = a.train_limit {
        train_samples.truncate(n);
    }
    let val_samples = load_samples(&val_path)?;
    let base = resolve_config(&a.model)?;
    check_dataset(&train_samples, &base.model, "train")?;
    let epochs = base.train.epochs;
    let plan = match a.protocol.as_str() {
        "full" => AblationPlan::full(base, a.seeds.clone(), epochs),
        "trends" => AblationPlan::trends(base, a.seeds.clone(), epochs),
        p => return Err(Error::Invalid(format!("unknown protocol '{p}' (full, trends)"))),
    };
    create_dir(&a.out)?;
    let manifests = a.out.join("manifests");
    create_dir(&manifests)?;
    let (tr, va) = (to_split(&train_samples)?, to_split(&val_samples)?);
    let mut saved = Vec::new();
    let mut on_row = |row: &ablation::AblationRow| {
        println!("{:14} seed {:3}  n={:5}  val {:.4}", row.label, row.seed, row.train_size, row.val_accuracy);
        let name = format!("{}_seed{}.json", row.label.replace(['=', '%'], ""), row.seed);
        let m = row.manifest.clone().input(&train_path).input(&val_path);
        saved.push(m.save(&manifests.join(name)));
    };
    let report = ablation::run_ablations(&plan, &tr, &va, &mut on_row)?;
    saved.into_iter().collect::<Result<Vec<_>>>()?;
    let md = report.to_markdown();
    print!("\n{md}");
    std::fs::write(a.out.join("report.md"), &md)?;
    report.write_csv(&a.out.join("report.csv"))?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    RunManifest::new("ablate", &plan, a.seeds.first().copied().unwrap_or(0))?
        .input(&train_path)
        .input(&val_path)
        .output(a.out.join("report.md"))
        .output(a.out.join("report.csv"))
        .output(a.out.join("report.json"))
        .save(&a.out.join("manifest.json"))?;
    if let Some(e) = &report.aborted {
        return Err(Error::Invalid(format!("ablation aborted: {e}")));
    }
    Ok(ExitCode::SUCCESS)
}
