//! Command-line interface. Every command reads and writes under `--out` and
//! records what it wrote in `<out>/manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stip_core::metrics::Metrics;
use stip_core::scalar::Real;
use stip_core::train::evaluate;

use crate::config::{Config, Precision};
use crate::dataset::{assemble_dataset, balance, split};
use crate::error::{Error, Result};
use crate::formats::{
    read_corpus, read_dataset, read_json, write_corpus, write_csv, write_dataset,
    write_embedding, write_json, write_vocab, Dataset, FORMAT_VERSION,
};
use crate::harness::{
    distill, load_student, load_teacher, prepare_tokenized, preprocess_corpus, refresh_blocks, run_pipeline, run_repeats,
    save_checkpoint, serialize_metrics, split_seed, train_teacher, transfer_finetune, CheckpointMeta, CurvePoint,
    ModelKind, PipelineRun, Prepared,
};
use crate::preprocess::{load_contracts, PatternTable, VulnClass};
use crate::report::emit_report;
use crate::synth::{make_synthetic_corpus, write_corpus_dir};

#[derive(Debug, Parser)]
#[command(name = "stip", version, about = "Smart-contract vulnerability detection with data-free distillation")]
pub struct Cli {
    /// Base random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Floating-point precision; overrides the config file.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Strip, tokenize and annotate a directory of contracts with labels.csv.
    Preprocess(PreprocessArgs),
    /// Train word vectors and assemble the train/test datasets.
    Embed(EmbedArgs),
    /// Train the teacher on an assembled dataset.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a teacher checkpoint without data.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on an assembled dataset.
    Eval(EvalArgs),
    /// Fine-tune a student checkpoint on another class.
    Transfer(TransferArgs),
    /// Regenerate the report files from a saved report.json.
    Report(ReportArgs),
    /// Generate a planted-pattern corpus.
    SynthCorpus(SynthArgs),
    /// Synthetic corpus, preprocessing, embedding, all models, report.
    RunAll(RunAllArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory with `.sol` files and labels.csv [default: <out>/corpus]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Pattern table replacing the built-in one.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// [default: <out>/corpus.jsonl]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Classes to assemble [default: harness.class and harness.transfer_class]
    #[arg(long = "class")]
    pub classes: Vec<VulnClass>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// [default: harness.class]
    #[arg(long)]
    pub class: Option<VulnClass>,
    /// [default: <out>/datasets/<class>_train.json]
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation set [default: <out>/datasets/<class>_test.json]
    #[arg(long)]
    pub valid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// [default: <out>/teacher.json]
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Held-out set evaluated between distillation blocks (never trained on).
    #[arg(long)]
    pub monitor: Option<PathBuf>,
    /// Number of recorded blocks [default: one per pseudo-batch refresh]
    #[arg(long)]
    pub blocks: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Teacher or student checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// [default: <out>/student.json]
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// [default: harness.transfer_class]
    #[arg(long)]
    pub class: Option<VulnClass>,
    /// [default: <out>/datasets/<class>_train.json]
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// [default: <out>/datasets/<class>_test.json]
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// [default: harness.transfer_epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// [default: <out>/report.json]
    #[arg(long)]
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Classes to generate [default: harness.class and harness.transfer_class]
    #[arg(long = "class")]
    pub classes: Vec<VulnClass>,
    /// Contracts per class [default: harness.synthetic_count]
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    /// Use an existing corpus directory instead of generating one.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// [default: harness.repeats]
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct Manifest {
    format_version: u32,
    /// Artifact name -> path relative to the output directory.
    files: BTreeMap<String, String>,
    commands: Vec<CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CommandRecord {
    command: String,
    seed: u64,
    precision: Precision,
    wall_clock_secs: f64,
    config: Config,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    cfg: Config,
    written: Vec<(String, PathBuf)>,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, name: impl Into<String>, path: &Path) {
        self.written.push((name.into(), path.to_path_buf()));
    }

    fn dataset_path(&self, class: VulnClass, part: &str) -> PathBuf {
        self.path(&format!("datasets/{class}_{part}.json"))
    }

    fn checkpoint_meta(&self, model: ModelKind, class: VulnClass, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            model,
            class,
            seed,
            seq_len: self.cfg.seq_len(),
            channels: self.cfg.channels(),
            config: self.cfg.clone(),
        }
    }

    fn write_manifest(&self, command: &str, started: Instant) -> Result<()> {
        let path = self.path("manifest.json");
        let mut manifest: Manifest = if path.exists() { read_json(&path)? } else { Manifest::default() };
        manifest.format_version = FORMAT_VERSION;
        for (name, p) in &self.written {
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            manifest.files.insert(name.clone(), rel.to_string_lossy().into_owned());
        }
        manifest.commands.push(CommandRecord {
            command: command.to_string(),
            seed: self.seed,
            precision: self.cfg.precision,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            config: self.cfg.clone(),
        });
        write_json(&path, &manifest)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Preprocess(_) => "preprocess",
        Command::Embed(_) => "embed",
        Command::TrainTeacher(_) => "train-teacher",
        Command::Distill(_) => "distill",
        Command::Eval(_) => "eval",
        Command::Transfer(_) => "transfer",
        Command::Report(_) => "report",
        Command::SynthCorpus(_) => "synth-corpus",
        Command::RunAll(_) => "run-all",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    let mut ctx = Ctx {
        out: cli.out.clone(),
        seed: cfg.seed,
        cfg,
        written: vec![],
    };
    match ctx.cfg.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &mut ctx)?,
        Precision::F64 => dispatch::<f64>(&cli.command, &mut ctx)?,
    }
    ctx.write_manifest(command_name(&cli.command), started)
}

fn dispatch<T: Real>(command: &Command, ctx: &mut Ctx) -> Result<()> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(ctx, a),
        Command::Embed(a) => cmd_embed::<T>(ctx, a),
        Command::TrainTeacher(a) => cmd_train_teacher::<T>(ctx, a),
        Command::Distill(a) => cmd_distill::<T>(ctx, a),
        Command::Eval(a) => cmd_eval::<T>(ctx, a),
        Command::Transfer(a) => cmd_transfer::<T>(ctx, a),
        Command::Report(a) => cmd_report(ctx, a),
        Command::SynthCorpus(a) => cmd_synth(ctx, a),
        Command::RunAll(a) => cmd_run_all::<T>(ctx, a),
    }
}

fn default_classes(cfg: &Config, given: &[VulnClass]) -> Vec<VulnClass> {
    if given.is_empty() {
        vec![cfg.harness.class, cfg.harness.transfer_class]
    } else {
        given.to_vec()
    }
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let dir = ctx.path("corpus");
    let labels = dir.join("labels.csv");
    if labels.exists() {
        std::fs::remove_file(&labels).map_err(Error::io(&labels))?;
    }
    let count = a.count.unwrap_or(ctx.cfg.harness.synthetic_count);
    for class in default_classes(&ctx.cfg, &a.classes) {
        let contracts = make_synthetic_corpus(count, class, ctx.seed)?;
        write_corpus_dir(&dir, &contracts)?;
        eprintln!("synth-corpus: {count} {class} contracts");
    }
    ctx.record("corpus", &dir);
    Ok(())
}

fn cmd_preprocess(ctx: &mut Ctx, a: &PreprocessArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.path("corpus"));
    let table = match &a.patterns {
        Some(p) => PatternTable::load(p)?,
        None => PatternTable::builtin(),
    };
    let corpus = preprocess_corpus(&load_contracts(&input)?, &table);
    let warnings: usize = corpus.iter().map(|c| c.warnings.len()).sum();
    let path = ctx.path("corpus.jsonl");
    write_corpus(&path, &corpus)?;
    eprintln!("preprocess: {} contracts, {warnings} warnings", corpus.len());
    ctx.record("corpus_tokens", &path);
    Ok(())
}

fn write_prepared(ctx: &mut Ctx, p: &Prepared) -> Result<()> {
    let vocab = ctx.path("vocab.tsv");
    write_vocab(&vocab, &p.vocab)?;
    ctx.record("vocab", &vocab);
    let emb = ctx.path("embedding.json");
    write_embedding(&emb, &p.embedding)?;
    ctx.record("embedding", &emb);
    let losses = ctx.path("cbow_losses.csv");
    let rows: Vec<Vec<String>> =
        p.cbow_losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]).collect();
    write_csv(&losses, &["epoch", "loss"], &rows)?;
    ctx.record("cbow_losses", &losses);
    Ok(())
}

fn write_splits<T: Real>(ctx: &mut Ctx, p: &Prepared, class: VulnClass) -> Result<()> {
    let seed = split_seed(&ctx.cfg, class, ctx.seed);
    let balanced = balance(&p.corpus, class, seed)?;
    let (train, test) = split(&balanced, ctx.cfg.data.split_ratio, seed)?;
    for (part, m) in [("train", train), ("test", test)] {
        let data: Dataset<T> =
            assemble_dataset(&m, &p.corpus, &p.vocab, &p.embedding, &ctx.cfg.assemble_options(), ctx.cfg.data.span_only)?;
        let path = ctx.dataset_path(class, part);
        write_dataset(&path, &data)?;
        ctx.record(format!("dataset_{class}_{part}"), &path);
    }
    Ok(())
}

fn cmd_embed<T: Real>(ctx: &mut Ctx, a: &EmbedArgs) -> Result<()> {
    let path = a.corpus.clone().unwrap_or_else(|| ctx.path("corpus.jsonl"));
    let p = prepare_tokenized(read_corpus(&path)?, &ctx.cfg, ctx.seed)?;
    write_prepared(ctx, &p)?;
    for class in default_classes(&ctx.cfg, &a.classes) {
        write_splits::<T>(ctx, &p, class)?;
    }
    eprintln!("embed: vocabulary {}, dim {}", p.vocab.len(), p.embedding.dim());
    Ok(())
}

fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let rows: Vec<Vec<String>> = curves
        .iter()
        .map(|c| {
            vec![
                c.epoch.to_string(),
                c.train_loss.to_string(),
                c.valid_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &["epoch", "train_loss", "valid_accuracy"], &rows)
}

fn load_dataset_for<T: Real>(ctx: &Ctx, path: &Path) -> Result<Dataset<T>> {
    let data = read_dataset::<T>(path)?;
    let (len, ch) = (data.meta.n * data.meta.k, data.meta.channels);
    if (len, ch) != (ctx.cfg.seq_len(), ctx.cfg.channels()) {
        return Err(Error::Config(format!(
            "dataset {} has inputs {len}x{ch} but the configuration expects {}x{}",
            path.display(),
            ctx.cfg.seq_len(),
            ctx.cfg.channels()
        )));
    }
    Ok(data)
}

fn cmd_train_teacher<T: Real>(ctx: &mut Ctx, a: &TrainTeacherArgs) -> Result<()> {
    let class = a.class.unwrap_or(ctx.cfg.harness.class);
    let train = load_dataset_for::<T>(ctx, &a.train.clone().unwrap_or_else(|| ctx.dataset_path(class, "train")))?;
    let valid_path = a.valid.clone().unwrap_or_else(|| ctx.dataset_path(class, "test"));
    let valid = if valid_path.exists() { Some(load_dataset_for::<T>(ctx, &valid_path)?) } else { None };
    let (teacher, curves) = train_teacher(&train.set, valid.as_ref().map(|d| &d.set), &ctx.cfg, ctx.seed)?;
    let path = ctx.path("teacher.json");
    save_checkpoint(&path, &teacher.store, &ctx.checkpoint_meta(ModelKind::Teacher, class, ctx.seed))?;
    ctx.record("teacher", &path);
    let cpath = ctx.path("teacher_curves.csv");
    write_curves(&cpath, &curves)?;
    ctx.record("teacher_curves", &cpath);
    if let Some(last) = curves.last() {
        eprintln!("train-teacher: final loss {:.4}, valid accuracy {:?}", last.train_loss, last.valid_accuracy);
    }
    Ok(())
}

fn write_history(path: &Path, history: &[stip_core::distill::DistillRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| {
            vec![
                h.step.to_string(),
                h.l_mse.to_string(),
                h.l_kl.to_string(),
                h.l_clf.to_string(),
                h.l_concat.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["step", "l_mse", "l_kl", "l_clf", "l_concat"], &rows)
}

fn cmd_distill<T: Real>(ctx: &mut Ctx, a: &DistillArgs) -> Result<()> {
    let tpath = a.teacher.clone().unwrap_or_else(|| ctx.path("teacher.json"));
    let (mut teacher, meta) = load_teacher::<T>(&tpath)?;
    let monitor = match &a.monitor {
        Some(p) => Some(load_dataset_for::<T>(ctx, p)?),
        None => None,
    };
    let blocks = a.blocks.unwrap_or_else(|| refresh_blocks(&ctx.cfg));
    let d = distill(&mut teacher, &ctx.cfg, ctx.seed, blocks, monitor.as_ref().map(|m| &m.set))?;
    let path = ctx.path("student.json");
    save_checkpoint(&path, &d.student.store, &ctx.checkpoint_meta(ModelKind::Student, meta.class, ctx.seed))?;
    ctx.record("student", &path);
    let hpath = ctx.path("distill_history.csv");
    write_history(&hpath, &d.history)?;
    ctx.record("distill_history", &hpath);
    let cpath = ctx.path("distill_curves.csv");
    write_curves(&cpath, &d.curves)?;
    ctx.record("distill_curves", &cpath);
    if let (Some(first), Some(last)) = (d.history.first(), d.history.last()) {
        eprintln!(
            "distill: L_MSE {:.4} -> {:.4}, L_concat {:.4} -> {:.4}",
            first.l_mse, last.l_mse, first.l_concat, last.l_concat
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    model: &'a str,
    data: &'a str,
    #[serde(serialize_with = "serialize_metrics")]
    metrics: Metrics,
}

fn checkpoint_kind(path: &Path) -> Result<ModelKind> {
    #[derive(Deserialize)]
    struct Head {
        meta: KindOnly,
    }
    #[derive(Deserialize)]
    struct KindOnly {
        model: ModelKind,
    }
    Ok(read_json::<Head>(path)?.meta.model)
}

fn cmd_eval<T: Real>(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let data = read_dataset::<T>(&a.data)?;
    let batch = ctx.cfg.harness.eval_batch;
    let metrics = match checkpoint_kind(&a.model)? {
        ModelKind::Teacher => evaluate(&mut load_teacher::<T>(&a.model)?.0, &data.set, batch)?,
        ModelKind::Student => evaluate(&mut load_student::<T>(&a.model, None)?.0, &data.set, batch)?,
    };
    let out = EvalOutput {
        model: &a.model.to_string_lossy(),
        data: &a.data.to_string_lossy(),
        metrics,
    };
    let text = serde_json::to_string_pretty(&out).expect("metrics serialize");
    println!("{text}");
    let stem = a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let path = ctx.path(&format!("eval_{stem}.json"));
    write_json(&path, &out)?;
    ctx.record(format!("eval_{stem}"), &path);
    Ok(())
}

#[derive(Serialize)]
struct TransferOutput {
    class: VulnClass,
    epochs: usize,
    #[serde(serialize_with = "serialize_metrics")]
    frozen: Metrics,
    #[serde(serialize_with = "serialize_metrics")]
    finetuned: Metrics,
    curves: Vec<CurvePoint>,
}

fn cmd_transfer<T: Real>(ctx: &mut Ctx, a: &TransferArgs) -> Result<()> {
    let class = a.class.unwrap_or(ctx.cfg.harness.transfer_class);
    let spath = a.student.clone().unwrap_or_else(|| ctx.path("student.json"));
    let train = read_dataset::<T>(&a.train.clone().unwrap_or_else(|| ctx.dataset_path(class, "train")))?;
    let test = read_dataset::<T>(&a.test.clone().unwrap_or_else(|| ctx.dataset_path(class, "test")))?;
    let input = (train.meta.n * train.meta.k, train.meta.channels);
    let (mut student, _) = load_student::<T>(&spath, Some(input))?;
    let epochs = a.epochs.unwrap_or(ctx.cfg.harness.transfer_epochs);
    let (frozen, curves) = transfer_finetune(&mut student, &train.set, &test.set, epochs, &ctx.cfg, ctx.seed)?;
    let finetuned = evaluate(&mut student, &test.set, ctx.cfg.harness.eval_batch)?;
    let path = ctx.path("transferred.json");
    save_checkpoint(&path, &student.store, &ctx.checkpoint_meta(ModelKind::Student, class, ctx.seed))?;
    ctx.record("transferred", &path);
    let rpath = ctx.path("transfer.json");
    write_json(
        &rpath,
        &TransferOutput {
            class,
            epochs,
            frozen,
            finetuned,
            curves,
        },
    )?;
    ctx.record("transfer", &rpath);
    eprintln!("transfer: F1 {:.4} frozen -> {:.4} fine-tuned", frozen.f1, finetuned.f1);
    Ok(())
}

fn record_report(ctx: &mut Ctx, files: Vec<PathBuf>) {
    for f in files {
        let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        ctx.record(name, &f);
    }
}

fn cmd_report(ctx: &mut Ctx, a: &ReportArgs) -> Result<()> {
    let path = a.runs.clone().unwrap_or_else(|| ctx.path("report.json"));
    let runs: Vec<PipelineRun> = read_json(&path)?;
    let files = emit_report(&runs, &ctx.out)?;
    record_report(ctx, files);
    Ok(())
}

fn cmd_run_all<T: Real>(ctx: &mut Ctx, a: &RunAllArgs) -> Result<()> {
    let input = match &a.input {
        Some(dir) => dir.clone(),
        None => {
            cmd_synth(
                ctx,
                &SynthArgs {
                    classes: vec![],
                    count: None,
                },
            )?;
            ctx.path("corpus")
        }
    };
    let raw = load_contracts(&input)?;
    let corpus = preprocess_corpus(&raw, &PatternTable::builtin());
    let cpath = ctx.path("corpus.jsonl");
    write_corpus(&cpath, &corpus)?;
    ctx.record("corpus_tokens", &cpath);
    let p = prepare_tokenized(corpus, &ctx.cfg, ctx.seed)?;
    write_prepared(ctx, &p)?;
    eprintln!("run-all: {} contracts, vocabulary {}", p.corpus.len(), p.vocab.len());

    let repeats = a.repeats.unwrap_or(ctx.cfg.harness.repeats);
    let cfg = ctx.cfg.clone();
    let mut checkpoints = vec![];
    let runs = run_repeats(repeats, ctx.seed, |repeat, seed| {
        let (run, models) = run_pipeline::<T>(&p, &cfg, repeat, seed)?;
        let dir = ctx.path(&format!("checkpoints/repeat_{repeat}"));
        let (class, tclass) = (cfg.harness.class, cfg.harness.transfer_class);
        let items = [
            ("teacher", &models.teacher.store, ModelKind::Teacher, class),
            ("scratch", &models.scratch.store, ModelKind::Student, class),
            ("student", &models.distilled.store, ModelKind::Student, class),
            ("transferred", &models.transferred.store, ModelKind::Student, tclass),
        ];
        for (name, store, kind, c) in items {
            let path = dir.join(format!("{name}.json"));
            save_checkpoint(&path, store, &ctx.checkpoint_meta(kind, c, seed))?;
            checkpoints.push((format!("checkpoint_{repeat}_{name}"), path));
        }
        eprintln!(
            "run-all: repeat {repeat} teacher F1 {:.4}, distilled {:.4}, scratch {:.4}, transfer {:.4} -> {:.4}",
            run.teacher.metrics.f1,
            run.distilled.metrics.f1,
            run.scratch.metrics.f1,
            run.transfer_frozen.f1,
            run.transfer.metrics.f1
        );
        Ok(run)
    })?;
    for (name, path) in checkpoints {
        ctx.record(name, &path);
    }
    let files = emit_report(&runs, &ctx.out)?;
    record_report(ctx, files);
    Ok(())
}

/// Parses the process arguments and runs the command.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["stip", "run-all", "--seed", "7", "--out", "x", "--precision", "f64"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert!(matches!(cli.precision, Some(PrecisionArg::F64)));
        assert!(matches!(cli.command, Command::RunAll(_)));
    }
}
