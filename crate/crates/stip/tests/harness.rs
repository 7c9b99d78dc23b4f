use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use stip::config::Config;
use stip::dataset::{balance, split};
use stip::formats::read_csv;
use stip::harness::{
    fresh_student, make_splits, prepare, prepare_tokenized, run_pipeline, transfer_finetune, Prepared,
};
use stip::preprocess::{preprocess, PatternTable, TokenizedContract, VulnClass};
use stip::report::{min_max_scale, min_max_unscale, REPORT_FILES, SCALE_HI, SCALE_LO};
use stip::synth::make_synthetic_corpus;
use stip_core::metrics::{Confusion, Metrics};

fn quick() -> Config {
    Config::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml")).unwrap()
}

fn tokenized(n: usize, classes: &[VulnClass], seed: u64) -> Vec<TokenizedContract> {
    let table = PatternTable::builtin();
    classes
        .iter()
        .flat_map(|&c| make_synthetic_corpus(n, c, seed).unwrap())
        .map(|raw| preprocess(&raw, &table))
        .collect()
}

fn prepared(cfg: &Config) -> Prepared {
    let mut raw = make_synthetic_corpus(40, VulnClass::Reentrancy, 2).unwrap();
    raw.extend(make_synthetic_corpus(40, VulnClass::Timestamp, 2).unwrap());
    prepare(&raw, &PatternTable::builtin(), cfg, 2).unwrap()
}

#[test]
fn balanced_split_is_stratified_without_leaks() {
    let mut corpus = tokenized(60, &[VulnClass::Reentrancy, VulnClass::Delegatecall], 4);
    // Drop some clean samples so balancing has to undersample.
    let mut dropped = 0;
    corpus.retain(|c| {
        let drop = c.label.class == VulnClass::Reentrancy && !c.label.vulnerable && dropped < 10;
        dropped += drop as usize;
        !drop
    });
    for seed in 0..20 {
        let m = balance(&corpus, VulnClass::Reentrancy, seed).unwrap();
        assert_eq!(m.positives(), m.negatives());
        assert_eq!(m.positives(), 20);
        let (train, test) = split(&m, 0.8, seed).unwrap();
        let tr: HashSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
        let te: HashSet<&str> = test.samples.iter().map(|s| s.id.as_str()).collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len() + te.len(), m.samples.len());
        assert!(train.positives().abs_diff(train.negatives()) <= 1);
        assert!(test.positives().abs_diff(test.negatives()) <= 1);
        assert_eq!(train.samples.len(), 32);
    }
    assert!(balance(&tokenized(20, &[VulnClass::Timestamp], 1), VulnClass::Reentrancy, 0).is_err());
}

proptest! {
    #[test]
    fn scaling_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let s = min_max_scale(&values);
        prop_assert_eq!(s.values.len(), values.len());
        for (&raw, &v) in values.iter().zip(&s.values) {
            prop_assert!((SCALE_LO - 1e-12..=SCALE_HI + 1e-12).contains(&v));
            if s.max > s.min {
                let back = min_max_unscale(v, s.min, s.max);
                prop_assert!((back - raw).abs() <= 1e-9 * (s.max - s.min).max(1.0), "{} vs {}", back, raw);
            }
        }
    }
}

/// Logistic regression over token and token-bigram presence, trained by
/// plain gradient descent.
struct BowLogistic {
    index: HashMap<String, usize>,
    w: Vec<f64>,
    b: f64,
}

impl BowLogistic {
    fn grams(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
        tokens.iter().cloned().chain(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])))
    }

    fn features(&self, tokens: &[String]) -> Vec<f64> {
        let mut x = vec![0.0; self.w.len()];
        for g in Self::grams(tokens) {
            if let Some(&i) = self.index.get(&g) {
                x[i] = 1.0;
            }
        }
        x
    }

    fn fit(train: &[TokenizedContract]) -> Self {
        let mut index = HashMap::new();
        for c in train {
            for g in Self::grams(&c.tokens) {
                let n = index.len();
                index.entry(g).or_insert(n);
            }
        }
        let mut m = BowLogistic { w: vec![0.0; index.len()], index, b: 0.0 };
        let xs: Vec<Vec<f64>> = train.iter().map(|c| m.features(&c.tokens)).collect();
        let lr = 0.5 / train.len() as f64;
        for _ in 0..300 {
            let mut gw = vec![0.0; m.w.len()];
            let mut gb = 0.0;
            for (x, c) in xs.iter().zip(train) {
                let p = 1.0 / (1.0 + (-m.score(x)).exp());
                let e = p - f64::from(u8::from(c.label.vulnerable));
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += e * xi;
                }
                gb += e;
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            m.b -= lr * gb;
        }
        m
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.b + self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
}

#[test]
fn synthetic_corpus_is_separable_by_a_bag_of_words_baseline() {
    for class in VulnClass::ALL {
        let corpus = tokenized(200, &[class], 9);
        let m = balance(&corpus, class, 3).unwrap();
        let (train, test) = split(&m, 0.8, 3).unwrap();
        let by_id: HashMap<&str, &TokenizedContract> = corpus.iter().map(|c| (c.id.as_str(), c)).collect();
        let pick = |ids: &[stip::dataset::SampleRef]| -> Vec<TokenizedContract> {
            ids.iter().map(|s| by_id[s.id.as_str()].clone()).collect()
        };
        let model = BowLogistic::fit(&pick(&train.samples));
        let mut c = Confusion::default();
        for s in pick(&test.samples) {
            let predicted = model.score(&model.features(&s.tokens)) > 0.0;
            match (predicted, s.label.vulnerable) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        let f1 = Metrics::from_confusion(c).f1;
        assert!(f1 >= 0.99, "{class}: f1 {f1}");
    }
}

#[test]
fn same_seed_runs_are_identical_and_zero_epoch_transfer_is_a_no_op() {
    let cfg = quick();
    let p = prepared(&cfg);
    let (a, _) = run_pipeline::<f64>(&p, &cfg, 0, 11).unwrap();
    let (b, _) = run_pipeline::<f64>(&p, &cfg, 0, 11).unwrap();
    let strip = |r: &stip::harness::PipelineRun| {
        let mut v = serde_json::to_value(r).unwrap();
        for key in ["teacher", "scratch", "distilled", "transfer"] {
            v[key].as_object_mut().unwrap().remove("wall_clock_secs");
        }
        v
    };
    assert_eq!(strip(&a), strip(&b));

    let s = make_splits::<f64>(&p, VulnClass::Timestamp, &cfg, 5).unwrap();
    let mut student = fresh_student::<f64>(&cfg, 5).unwrap();
    let before = student.store.checksum();
    let (frozen, curves) = transfer_finetune(&mut student, &s.train.set, &s.test.set, 0, &cfg, 5).unwrap();
    assert!(curves.is_empty());
    assert_eq!(student.store.checksum(), before);
    let after = stip_core::train::evaluate(&mut student, &s.test.set, cfg.harness.eval_batch).unwrap();
    assert_eq!(after, frozen);
}

#[test]
fn prepare_is_deterministic_and_matches_prepare_tokenized() {
    let cfg = quick();
    let raw = make_synthetic_corpus(30, VulnClass::Reentrancy, 6).unwrap();
    let a = prepare(&raw, &PatternTable::builtin(), &cfg, 6).unwrap();
    let tok: Vec<_> = raw.iter().map(|r| preprocess(r, &PatternTable::builtin())).collect();
    let b = prepare_tokenized(tok, &cfg, 6).unwrap();
    assert_eq!(a.vocab, b.vocab);
    assert_eq!(a.embedding, b.embedding);
}

fn stip(out: &Path, args: &[&str]) {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml");
    let status = Command::new(env!("CARGO_BIN_EXE_stip"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"))
}

#[test]
fn summary_agrees_with_per_run_metrics_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stip(out, &["run-all"]);

    let (mh, metrics) = read_csv(&out.join("metrics.csv")).unwrap();
    let (sh, summary) = read_csv(&out.join("summary.csv")).unwrap();
    let (model, runs) = (column(&sh, "model"), column(&sh, "runs"));
    for row in &summary {
        let picked: Vec<&Vec<String>> = metrics.iter().filter(|r| r[column(&mh, "model")] == row[model]).collect();
        assert_eq!(picked.len().to_string(), row[runs]);
        assert_eq!(picked.len(), 2);
        for metric in ["accuracy", "precision", "recall", "f1"] {
            let xs: Vec<f64> = picked.iter().map(|r| r[column(&mh, metric)].parse().unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let got_mean: f64 = row[column(&sh, &format!("{metric}_mean"))].parse().unwrap();
            let got_std: f64 = row[column(&sh, &format!("{metric}_std"))].parse().unwrap();
            assert!((got_mean - mean).abs() < 1e-12, "{metric} mean");
            assert!((got_std - var.sqrt()).abs() < 1e-12, "{metric} std");
        }
    }

    let (ch, comparison) = read_csv(&out.join("distill_comparison.csv")).unwrap();
    let raw = column(&ch, "pre_loss_raw");
    assert!(!comparison.is_empty());
    for row in &comparison {
        assert_eq!(row.len(), ch.len());
        assert!(!row[raw].is_empty());
    }

    let before: Vec<(PathBuf, Vec<u8>)> = REPORT_FILES
        .iter()
        .filter(|f| f.ends_with(".csv"))
        .map(|f| out.join(f))
        .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
        .collect();
    for (p, _) in &before {
        std::fs::remove_file(p).unwrap();
    }
    stip(out, &["report"]);
    for (p, bytes) in before {
        assert_eq!(std::fs::read(&p).unwrap(), bytes, "{}", p.display());
    }
}
