//! Training, distillation, evaluation and transfer workflows.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use stip_core::distill::{distill_student, DistillRecord};
use stip_core::embed::{train_cbow, CbowRun, EmbeddingMatrix, Vocabulary};
use stip_core::metrics::{Confusion, Metrics, MetricSummary};
use stip_core::model::{build_student, build_teacher, StudentModel, TeacherModel};
use stip_core::rng;
use stip_core::scalar::Real;
use stip_core::train::{evaluate, train_classifier, EpochRecord, LabeledSet};
use stip_core::ParameterStore;

use crate::config::Config;
use crate::dataset::{assemble_dataset, balance, split, DatasetManifest};
use crate::error::{Error, Result};
use crate::formats::{load_into_store, read_checkpoint, write_checkpoint, Dataset};
use crate::preprocess::{preprocess, PatternTable, RawContract, TokenizedContract, VulnClass};

/// Sub-seed streams, so that each stochastic stage of a run is independent.
mod stream {
    pub const TEACHER_INIT: u64 = 1;
    pub const TEACHER_TRAIN: u64 = 2;
    pub const STUDENT_INIT: u64 = 3;
    pub const SCRATCH_TRAIN: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const TRANSFER_TRAIN: u64 = 6;
    pub const TRANSFER_SPLIT: u64 = 7;
    pub const CBOW: u64 = 8;
}

pub fn preprocess_corpus(raw: &[RawContract], table: &PatternTable) -> Vec<TokenizedContract> {
    raw.iter().map(|c| preprocess(c, table)).collect()
}

pub fn build_vocab(corpus: &[TokenizedContract], min_count: u64) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    Ok(Vocabulary::build(corpus.iter().map(|c| c.tokens.iter().map(String::as_str)), min_count)?)
}

pub fn train_embedding(corpus: &[TokenizedContract], vocab: &Vocabulary, cfg: &Config, seed: u64) -> Result<CbowRun> {
    let docs: Vec<Vec<usize>> = corpus.iter().map(|c| vocab.encode(c.tokens.iter().map(String::as_str))).collect();
    Ok(train_cbow(&docs, vocab.len(), vocab.hash(), &cfg.cbow_config(rng::derive(seed, stream::CBOW)))?)
}

/// A preprocessed corpus with its vocabulary and word vectors.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Vec<TokenizedContract>,
    pub vocab: Vocabulary,
    pub embedding: EmbeddingMatrix,
    pub cbow_losses: Vec<f64>,
}

pub fn prepare(raw: &[RawContract], table: &PatternTable, cfg: &Config, seed: u64) -> Result<Prepared> {
    prepare_tokenized(preprocess_corpus(raw, table), cfg, seed)
}

pub fn prepare_tokenized(corpus: Vec<TokenizedContract>, cfg: &Config, seed: u64) -> Result<Prepared> {
    let vocab = build_vocab(&corpus, cfg.data.min_count)?;
    let run = train_embedding(&corpus, &vocab, cfg, seed)?;
    Ok(Prepared {
        corpus,
        vocab,
        embedding: run.embedding,
        cbow_losses: run.epoch_losses,
    })
}

/// Seed of the balance/split for `class`: the transfer class uses its own
/// stream so that its split does not mirror the main one.
pub fn split_seed(cfg: &Config, class: VulnClass, seed: u64) -> u64 {
    if class == cfg.harness.class {
        seed
    } else {
        rng::derive(seed, stream::TRANSFER_SPLIT)
    }
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

/// Balances `class`, splits it and assembles both parts.
pub fn make_splits<T: Real>(p: &Prepared, class: VulnClass, cfg: &Config, seed: u64) -> Result<Splits<T>> {
    let balanced = balance(&p.corpus, class, seed)?;
    let (train, test) = split(&balanced, cfg.data.split_ratio, seed)?;
    let build = |m: &DatasetManifest| {
        assemble_dataset(m, &p.corpus, &p.vocab, &p.embedding, &cfg.assemble_options(), cfg.data.span_only)
    };
    Ok(Splits {
        train: build(&train)?,
        test: build(&test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: Option<f64>,
}

impl From<EpochRecord> for CurvePoint {
    fn from(r: EpochRecord) -> Self {
        CurvePoint {
            epoch: r.epoch,
            train_loss: r.train_loss,
            valid_accuracy: r.valid_accuracy,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetricsRecord {
    tp: u64,
    tn: u64,
    fp: u64,
    fn_: u64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    undefined: bool,
}

pub(crate) fn serialize_metrics<S: Serializer>(m: &Metrics, s: S) -> std::result::Result<S::Ok, S::Error> {
    let c = m.confusion;
    MetricsRecord {
        tp: c.tp,
        tn: c.tn,
        fp: c.fp,
        fn_: c.fn_,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        undefined: m.undefined,
    }
    .serialize(s)
}

/// Rebuilds metrics from the stored confusion counts.
fn deserialize_metrics<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Metrics, D::Error> {
    let r = MetricsRecord::deserialize(d)?;
    Ok(Metrics::from_confusion(Confusion {
        tp: r.tp,
        tn: r.tn,
        fp: r.fp,
        fn_: r.fn_,
    }))
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "DistillRecord")]
struct DistillRecordDef {
    step: usize,
    l_mse: f64,
    l_kl: f64,
    l_clf: f64,
    l_concat: f64,
}

mod history_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "DistillRecordDef")] DistillRecord);

    pub fn serialize<S: Serializer>(h: &[DistillRecord], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(h.iter().map(|r| Wrap(*r)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<DistillRecord>, D::Error> {
        Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub repeat: usize,
    pub seed: u64,
    /// One entry per completed epoch.
    pub curves: Vec<CurvePoint>,
    #[serde(serialize_with = "serialize_metrics", deserialize_with = "deserialize_metrics")]
    pub metrics: Metrics,
    pub wall_clock_secs: f64,
}

pub fn train_teacher<T: Real>(
    train: &LabeledSet<T>,
    valid: Option<&LabeledSet<T>>,
    cfg: &Config,
    seed: u64,
) -> Result<(TeacherModel<T>, Vec<CurvePoint>)> {
    let mut teacher = build_teacher(&cfg.teacher_spec(rng::derive(seed, stream::TEACHER_INIT)))?;
    let tc = cfg.train.to_core(cfg.train.epochs, rng::derive(seed, stream::TEACHER_TRAIN));
    let curves = train_classifier(&mut teacher, train, valid, &tc)?;
    Ok((teacher, curves.into_iter().map(Into::into).collect()))
}

pub fn fresh_student<T: Real>(cfg: &Config, seed: u64) -> Result<StudentModel<T>> {
    Ok(build_student(&cfg.student_spec(rng::derive(seed, stream::STUDENT_INIT)))?)
}

/// The student trained directly on labelled data, without distillation.
pub fn train_scratch_student<T: Real>(
    train: &LabeledSet<T>,
    valid: Option<&LabeledSet<T>>,
    cfg: &Config,
    seed: u64,
) -> Result<(StudentModel<T>, Vec<CurvePoint>)> {
    let mut student = fresh_student(cfg, seed)?;
    let tc = cfg.train.to_core(cfg.train.epochs, rng::derive(seed, stream::SCRATCH_TRAIN));
    let curves = train_classifier(&mut student, train, valid, &tc)?;
    Ok((student, curves.into_iter().map(Into::into).collect()))
}

#[derive(Debug, Clone)]
pub struct Distilled<T> {
    pub student: StudentModel<T>,
    pub history: Vec<DistillRecord>,
    /// Mean `L_concat` per block, with held-out accuracy after the block
    /// when a monitor set is given.
    pub curves: Vec<CurvePoint>,
}

/// One curve point per pseudo-batch refresh.
pub fn refresh_blocks(cfg: &Config) -> usize {
    cfg.distill.steps.div_ceil(cfg.distill.refresh_every).max(1)
}

/// Data-free distillation, run as `blocks` consecutive chunks of the step
/// budget so a loss/accuracy curve can be recorded. Every block starts with
/// a fresh pseudo-batch, so block boundaries should fall on refreshes. The
/// monitor set is only evaluated between chunks; the distillation steps
/// never see it.
pub fn distill<T: Real>(
    teacher: &mut TeacherModel<T>,
    cfg: &Config,
    seed: u64,
    blocks: usize,
    monitor: Option<&LabeledSet<T>>,
) -> Result<Distilled<T>> {
    let mut student = fresh_student(cfg, seed)?;
    let total = cfg.distill.steps;
    let blocks = blocks.clamp(1, total.max(1));
    let mut history = Vec::with_capacity(total);
    let mut curves = vec![];
    for b in 0..blocks {
        let steps = total * (b + 1) / blocks - total * b / blocks;
        let mut dc = cfg.distill.to_core();
        dc.steps = steps;
        let offset = history.len();
        let records = distill_student(teacher, &mut student, &dc, rng::derive(rng::derive(seed, stream::DISTILL), b as u64))?;
        let mean = records.iter().map(|r| r.l_concat).sum::<f64>() / records.len().max(1) as f64;
        history.extend(records.into_iter().map(|mut r| {
            r.step += offset;
            r
        }));
        let valid_accuracy = match monitor {
            Some(m) => Some(evaluate(&mut student, m, cfg.harness.eval_batch)?.accuracy),
            None => None,
        };
        curves.push(CurvePoint {
            epoch: b,
            train_loss: mean,
            valid_accuracy,
        });
    }
    Ok(Distilled {
        student,
        history,
        curves,
    })
}

/// Evaluates `student` as loaded, then fine-tunes it on `train` with the
/// supervised training settings. Returns the frozen metrics and the curves.
pub fn transfer_finetune<T: Real>(
    student: &mut StudentModel<T>,
    train: &LabeledSet<T>,
    test: &LabeledSet<T>,
    epochs: usize,
    cfg: &Config,
    seed: u64,
) -> Result<(Metrics, Vec<CurvePoint>)> {
    let frozen = evaluate(student, test, cfg.harness.eval_batch)?;
    let tc = cfg.train.to_core(epochs, rng::derive(seed, stream::TRANSFER_TRAIN));
    // Fresh optimizer state: the distillation SGD state does not carry over.
    let fresh = student.store.cast::<T>();
    student.store = fresh;
    let curves = train_classifier(student, train, Some(test), &tc)?;
    Ok((frozen, curves.into_iter().map(Into::into).collect()))
}

/// Closed-form trainable parameter counts of the configured networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub teacher: usize,
    pub student: usize,
}

impl ParamCounts {
    pub fn of(cfg: &Config) -> Self {
        ParamCounts {
            teacher: cfg.teacher_spec(0).param_count(),
            student: cfg.student_spec(0).param_count(),
        }
    }

    pub fn ratio(&self) -> f64 {
        self.student as f64 / self.teacher as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRun {
    pub repeat: usize,
    pub seed: u64,
    pub class: VulnClass,
    pub transfer_class: VulnClass,
    pub params: ParamCounts,
    pub teacher: RunReport,
    pub scratch: RunReport,
    pub distilled: RunReport,
    #[serde(serialize_with = "serialize_metrics", deserialize_with = "deserialize_metrics")]
    pub transfer_frozen: Metrics,
    pub transfer: RunReport,
    #[serde(with = "history_serde")]
    pub distill_history: Vec<DistillRecord>,
}

#[derive(Debug, Clone)]
pub struct Models<T> {
    pub teacher: TeacherModel<T>,
    pub scratch: StudentModel<T>,
    pub distilled: StudentModel<T>,
    pub transferred: StudentModel<T>,
}

/// One full run: teacher, scratch student, distilled student and transfer of
/// the distilled student to `harness.transfer_class`.
pub fn run_pipeline<T: Real>(p: &Prepared, cfg: &Config, repeat: usize, seed: u64) -> Result<(PipelineRun, Models<T>)> {
    let data = make_splits::<T>(p, cfg.harness.class, cfg, seed)?;
    let (train, test) = (&data.train.set, &data.test.set);
    let report = |model: &str, curves: Vec<CurvePoint>, metrics: Metrics, started: Instant| RunReport {
        model: model.to_string(),
        repeat,
        seed,
        curves,
        metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let batch = cfg.harness.eval_batch;

    let t0 = Instant::now();
    let (mut teacher, curves) = train_teacher(train, Some(test), cfg, seed)?;
    let teacher_report = report("teacher", curves, evaluate(&mut teacher, test, batch)?, t0);

    let t0 = Instant::now();
    let (mut scratch, curves) = train_scratch_student(train, Some(test), cfg, seed)?;
    let scratch_report = report("student_scratch", curves, evaluate(&mut scratch, test, batch)?, t0);

    let t0 = Instant::now();
    let mut d = distill(&mut teacher, cfg, seed, refresh_blocks(cfg), Some(test))?;
    let distilled_report = report("student_distilled", d.curves, evaluate(&mut d.student, test, batch)?, t0);

    let t0 = Instant::now();
    let new = make_splits::<T>(p, cfg.harness.transfer_class, cfg, split_seed(cfg, cfg.harness.transfer_class, seed))?;
    let mut transferred = d.student.clone();
    let (frozen, curves) = transfer_finetune(
        &mut transferred,
        &new.train.set,
        &new.test.set,
        cfg.harness.transfer_epochs,
        cfg,
        seed,
    )?;
    let transfer_report = report(
        "transfer_finetuned",
        curves,
        evaluate(&mut transferred, &new.test.set, batch)?,
        t0,
    );

    let run = PipelineRun {
        repeat,
        seed,
        class: cfg.harness.class,
        transfer_class: cfg.harness.transfer_class,
        params: ParamCounts::of(cfg),
        teacher: teacher_report,
        scratch: scratch_report,
        distilled: distilled_report,
        transfer_frozen: frozen,
        transfer: transfer_report,
        distill_history: d.history,
    };
    let models = Models {
        teacher,
        scratch,
        distilled: d.student,
        transferred,
    };
    Ok((run, models))
}

/// Runs `workflow` with seeds `base_seed..base_seed + n`.
pub fn run_repeats<R>(n: usize, base_seed: u64, mut workflow: impl FnMut(usize, u64) -> Result<R>) -> Result<Vec<R>> {
    (0..n).map(|i| workflow(i, base_seed + i as u64)).collect()
}

pub fn summarize_model(runs: &[PipelineRun], pick: impl Fn(&PipelineRun) -> Metrics) -> MetricSummary {
    stip_core::metrics::summarize(&runs.iter().map(pick).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelKind,
    pub class: VulnClass,
    pub seed: u64,
    pub seq_len: usize,
    pub channels: usize,
    pub config: Config,
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParameterStore<T>, meta: &CheckpointMeta) -> Result<()> {
    write_checkpoint(path, store, serde_json::to_value(meta).expect("config serializes"))
}

fn read_meta<T: Real>(path: &Path, kind: ModelKind) -> Result<(CheckpointMeta, Vec<(String, stip_core::Tensor<T>)>)> {
    let (meta, tensors) = read_checkpoint::<T>(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
    if meta.model != kind {
        return Err(Error::format(path, format!("expected a {kind:?} checkpoint, found {:?}", meta.model)));
    }
    Ok((meta, tensors))
}

pub fn load_teacher<T: Real>(path: &Path) -> Result<(TeacherModel<T>, CheckpointMeta)> {
    let (meta, tensors) = read_meta::<T>(path, ModelKind::Teacher)?;
    let mut spec = meta.config.teacher_spec(meta.seed);
    spec.seq_len = meta.seq_len;
    spec.channels = meta.channels;
    let mut teacher = build_teacher(&spec)?;
    load_into_store(&mut teacher.store, &tensors)?;
    Ok((teacher, meta))
}

/// Loads a student checkpoint. `input` overrides the input shape the network
/// is built for; weights that no longer fit are reported by name.
pub fn load_student<T: Real>(path: &Path, input: Option<(usize, usize)>) -> Result<(StudentModel<T>, CheckpointMeta)> {
    let (meta, tensors) = read_meta::<T>(path, ModelKind::Student)?;
    let mut spec = meta.config.student_spec(meta.seed);
    (spec.seq_len, spec.channels) = input.unwrap_or((meta.seq_len, meta.channels));
    let mut student = build_student(&spec)?;
    load_into_store(&mut student.store, &tensors)?;
    Ok((student, meta))
}
