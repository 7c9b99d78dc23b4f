//! Report files: metric tables, training curves, distillation history, the
//! pre/post distillation loss comparison and published reference numbers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stip_core::metrics::{summarize, Metrics};

use crate::error::{Error, Result};
use crate::formats::{write_csv, write_json};
use crate::harness::PipelineRun;
use crate::preprocess::VulnClass;

pub const SCALE_LO: f64 = 0.04;
pub const SCALE_HI: f64 = 0.5;

/// Min-max scaled series together with the range needed to invert it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaled {
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// Maps `values` affinely onto `[SCALE_LO, SCALE_HI]`; a constant series maps
/// to `SCALE_LO` throughout.
pub fn min_max_scale(values: &[f64]) -> Scaled {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                SCALE_LO + (v - min) / range * (SCALE_HI - SCALE_LO)
            } else {
                SCALE_LO
            }
        })
        .collect();
    Scaled { values, min, max }
}

/// Recovers a raw value from its scaled form.
pub fn min_max_unscale(scaled: f64, min: f64, max: f64) -> f64 {
    min + (scaled - SCALE_LO) / (SCALE_HI - SCALE_LO) * (max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reference {
    pub source: &'static str,
    pub model: &'static str,
    pub class: &'static str,
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: f64,
}

const fn table_row(model: &'static str, class: &'static str, v: [f64; 4]) -> Reference {
    Reference {
        source: "table-2",
        model,
        class,
        accuracy: Some(v[0]),
        recall: Some(v[1]),
        precision: Some(v[2]),
        f1: v[3],
    }
}

/// Published results on the real labelled corpus, in percent. Reported for
/// comparison only.
pub const REFERENCES: [Reference; 10] = [
    Reference {
        source: "abstract",
        model: "student-post",
        class: "average",
        accuracy: None,
        recall: None,
        precision: None,
        f1: 91.16,
    },
    Reference {
        source: "abstract",
        model: "student-transfer",
        class: "cdav",
        accuracy: Some(91.02),
        recall: None,
        precision: None,
        f1: 90.46,
    },
    table_row("student-post", "reentrancy", [89.58, 89.58, 89.74, 89.65]),
    table_row("student-post", "timestamp", [95.12, 94.92, 96.15, 95.55]),
    table_row("student-post", "delegatecall", [95.73, 92.07, 95.73, 93.86]),
    table_row("student-post", "integer-overflow-underflow", [85.55, 85.03, 86.11, 85.56]),
    table_row("student-pre", "reentrancy", [85.41, 83.33, 84.43, 83.87]),
    table_row("student-pre", "timestamp", [93.58, 91.98, 94.39, 93.17]),
    table_row("student-pre", "delegatecall", [90.24, 91.35, 90.34, 90.84]),
    table_row("student-pre", "integer-overflow-underflow", [79.55, 79.29, 81.46, 80.36]),
];

/// Tolerance, in F1 points, for comparing a real-data run with [`REFERENCES`].
pub const REFERENCE_TOLERANCE: f64 = 10.0;

pub fn reference_for(model: &str, class: VulnClass) -> Option<&'static Reference> {
    REFERENCES.iter().find(|r| r.model == model && r.class == class.name())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn metric_cells(m: &Metrics) -> Vec<String> {
    let c = m.confusion;
    vec![
        num(m.accuracy),
        num(m.precision),
        num(m.recall),
        num(m.f1),
        c.tp.to_string(),
        c.tn.to_string(),
        c.fp.to_string(),
        c.fn_.to_string(),
        u8::from(m.undefined).to_string(),
    ]
}

const METRIC_HEADER: [&str; 12] = [
    "repeat", "seed", "model", "accuracy", "precision", "recall", "f1", "tp", "tn", "fp", "fn", "undefined",
];

/// The model-level results of one run, in report order.
pub fn run_metrics(run: &PipelineRun) -> Vec<(&'static str, &Metrics)> {
    vec![
        ("teacher", &run.teacher.metrics),
        ("student_distilled", &run.distilled.metrics),
        ("student_scratch", &run.scratch.metrics),
        ("transfer_frozen", &run.transfer_frozen),
        ("transfer_finetuned", &run.transfer.metrics),
    ]
}

/// Files written by [`emit_report`], relative to its output directory.
pub const REPORT_FILES: [&str; 7] = [
    "metrics.csv",
    "summary.csv",
    "curves.csv",
    "distill_history.csv",
    "distill_comparison.csv",
    "reference.csv",
    "report.json",
];

pub fn emit_report(runs: &[PipelineRun], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Data("no runs to report".into()));
    }
    let mut rows = vec![];
    for r in runs {
        for (model, m) in run_metrics(r) {
            let mut row = vec![r.repeat.to_string(), r.seed.to_string(), model.to_string()];
            row.extend(metric_cells(m));
            rows.push(row);
        }
    }
    write_csv(&out.join("metrics.csv"), &METRIC_HEADER, &rows)?;

    let mut rows = vec![];
    for (i, (model, _)) in run_metrics(&runs[0]).into_iter().enumerate() {
        let all: Vec<Metrics> = runs.iter().map(|r| *run_metrics(r)[i].1).collect();
        let s = summarize(&all);
        let mut row = vec![model.to_string(), s.runs.to_string()];
        for ms in [s.accuracy, s.precision, s.recall, s.f1] {
            row.push(num(ms.mean));
            row.push(num(ms.std));
        }
        rows.push(row);
    }
    write_csv(
        &out.join("summary.csv"),
        &[
            "model",
            "runs",
            "accuracy_mean",
            "accuracy_std",
            "precision_mean",
            "precision_std",
            "recall_mean",
            "recall_std",
            "f1_mean",
            "f1_std",
        ],
        &rows,
    )?;

    let mut rows = vec![];
    for r in runs {
        for report in [&r.teacher, &r.scratch, &r.distilled, &r.transfer] {
            for p in &report.curves {
                rows.push(vec![
                    r.repeat.to_string(),
                    report.model.clone(),
                    p.epoch.to_string(),
                    num(p.train_loss),
                    p.valid_accuracy.map(num).unwrap_or_default(),
                ]);
            }
        }
    }
    write_csv(
        &out.join("curves.csv"),
        &["repeat", "model", "epoch", "train_loss", "valid_accuracy"],
        &rows,
    )?;

    let mut rows = vec![];
    for r in runs {
        for h in &r.distill_history {
            rows.push(vec![
                r.repeat.to_string(),
                h.step.to_string(),
                num(h.l_mse),
                num(h.l_kl),
                num(h.l_clf),
                num(h.l_concat),
            ]);
        }
    }
    write_csv(
        &out.join("distill_history.csv"),
        &["repeat", "step", "l_mse", "l_kl", "l_clf", "l_concat"],
        &rows,
    )?;

    let mut rows = vec![];
    for r in runs {
        let pre: Vec<f64> = r.scratch.curves.iter().map(|p| p.train_loss).collect();
        let scaled = min_max_scale(&pre);
        for (i, p) in r.scratch.curves.iter().enumerate() {
            let post = r.distilled.curves.get(i);
            rows.push(vec![
                r.repeat.to_string(),
                p.epoch.to_string(),
                num(p.train_loss),
                num(scaled.values[i]),
                num(scaled.min),
                num(scaled.max),
                post.map(|q| num(q.train_loss)).unwrap_or_default(),
                p.valid_accuracy.map(num).unwrap_or_default(),
                post.and_then(|q| q.valid_accuracy).map(num).unwrap_or_default(),
            ]);
        }
    }
    write_csv(
        &out.join("distill_comparison.csv"),
        &[
            "repeat",
            "epoch",
            "pre_loss_raw",
            "pre_loss_scaled",
            "pre_loss_min",
            "pre_loss_max",
            "post_loss",
            "pre_accuracy",
            "post_accuracy",
        ],
        &rows,
    )?;

    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let rows: Vec<Vec<String>> = REFERENCES
        .iter()
        .map(|r| {
            vec![
                r.source.to_string(),
                r.model.to_string(),
                r.class.to_string(),
                opt(r.accuracy),
                opt(r.recall),
                opt(r.precision),
                num(r.f1),
                num(REFERENCE_TOLERANCE),
            ]
        })
        .collect();
    write_csv(
        &out.join("reference.csv"),
        &["source", "model", "class", "accuracy", "recall", "precision", "f1", "f1_tolerance"],
        &rows,
    )?;

    write_json(&out.join("report.json"), &runs)?;
    Ok(REPORT_FILES.iter().map(|f| out.join(f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_hits_both_bounds() {
        let s = min_max_scale(&[3.0, 1.0, 2.0]);
        assert_eq!((s.values[0], s.values[1]), (SCALE_HI, SCALE_LO));
        assert!((s.values[2] - 0.27).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 3.0));
    }

    #[test]
    fn constant_series_maps_to_lower_bound() {
        assert_eq!(min_max_scale(&[0.7; 4]).values, [SCALE_LO; 4]);
    }

    #[test]
    fn reference_average_matches_table() {
        let post: Vec<f64> = REFERENCES.iter().filter(|r| r.source == "table-2" && r.model == "student-post").map(|r| r.f1).collect();
        let mean = post.iter().sum::<f64>() / post.len() as f64;
        assert!((mean - 91.16).abs() < 0.01);
    }
}
