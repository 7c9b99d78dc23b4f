use stip::config::Config;
use stip::formats::{
    read_checkpoint, read_corpus, read_csv, read_dataset, read_embedding, read_vocab, write_corpus,
    write_csv, write_dataset, write_embedding, write_vocab,
};
use stip::harness::{fresh_student, load_student, make_splits, prepare, save_checkpoint, CheckpointMeta, ModelKind};
use stip::preprocess::{PatternTable, VulnClass};
use stip::synth::make_synthetic_corpus;
use stip::Error;
use stip_core::model::Classifier;

fn quick() -> Config {
    Config::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml")).unwrap()
}

fn prepared(cfg: &Config) -> stip::harness::Prepared {
    let mut raw = make_synthetic_corpus(40, VulnClass::Reentrancy, 1).unwrap();
    raw.extend(make_synthetic_corpus(40, VulnClass::Timestamp, 1).unwrap());
    prepare(&raw, &PatternTable::builtin(), cfg, 1).unwrap()
}

#[test]
fn corpus_vocab_and_embedding_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(&quick());

    write_corpus(&dir.path().join("corpus.jsonl"), &p.corpus).unwrap();
    assert_eq!(read_corpus(&dir.path().join("corpus.jsonl")).unwrap(), p.corpus);

    write_vocab(&dir.path().join("vocab.tsv"), &p.vocab).unwrap();
    let vocab = read_vocab(&dir.path().join("vocab.tsv")).unwrap();
    assert_eq!(vocab, p.vocab);
    assert_eq!(vocab.hash(), p.vocab.hash());

    write_embedding(&dir.path().join("emb.json"), &p.embedding).unwrap();
    let emb = read_embedding(&dir.path().join("emb.json")).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(emb.vectors.data()), bits(p.embedding.vectors.data()));
    assert_eq!(emb, p.embedding);
    let blob = std::fs::metadata(dir.path().join("emb.bin")).unwrap().len() as usize;
    assert_eq!(blob, 4 * emb.vocab_size() * emb.dim());
}

#[test]
fn dataset_round_trips_at_both_precisions() {
    let cfg = quick();
    let p = prepared(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let s64 = make_splits::<f64>(&p, VulnClass::Reentrancy, &cfg, 3).unwrap();
    write_dataset(&dir.path().join("d64.json"), &s64.train).unwrap();
    assert_eq!(read_dataset::<f64>(&dir.path().join("d64.json")).unwrap(), s64.train);
    let s32 = make_splits::<f32>(&p, VulnClass::Reentrancy, &cfg, 3).unwrap();
    write_dataset(&dir.path().join("d32.json"), &s32.test).unwrap();
    assert_eq!(read_dataset::<f32>(&dir.path().join("d32.json")).unwrap(), s32.test);
}

#[test]
fn corrupt_blob_is_reported_with_its_path() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let s = make_splits::<f64>(&prepared(&cfg), VulnClass::Reentrancy, &cfg, 3).unwrap();
    let path = dir.path().join("d.json");
    write_dataset(&path, &s.train).unwrap();
    let bin = dir.path().join("d.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_dataset::<f64>(&path).unwrap_err().to_string();
    assert!(err.contains("d."), "{err}");
}

#[test]
fn checkpoint_restores_every_entry() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let student = fresh_student::<f64>(&cfg, 5).unwrap();
    let path = dir.path().join("student.json");
    let meta = CheckpointMeta {
        model: ModelKind::Student,
        class: VulnClass::Reentrancy,
        seed: 5,
        seq_len: cfg.seq_len(),
        channels: cfg.channels(),
        config: cfg.clone(),
    };
    save_checkpoint(&path, &student.store, &meta).unwrap();
    let (loaded, back) = load_student::<f64>(&path, None).unwrap();
    assert_eq!(back, meta);
    assert_eq!(loaded.store.checksum(), student.store.checksum());
    assert_eq!(loaded.count_params(), student.count_params());

    let (_, tensors) = read_checkpoint::<f32>(&path).unwrap();
    assert_eq!(tensors.len(), student.store.entries().count());
}

#[test]
fn shape_mismatch_names_the_offending_tensors() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let mut student = fresh_student::<f64>(&cfg, 5).unwrap();
    let path = dir.path().join("student.json");
    let meta = CheckpointMeta {
        model: ModelKind::Student,
        class: VulnClass::Reentrancy,
        seed: 5,
        seq_len: cfg.seq_len(),
        channels: cfg.channels(),
        config: cfg.clone(),
    };
    save_checkpoint(&path, &student.store, &meta).unwrap();

    let err = load_student::<f64>(&path, Some((cfg.seq_len(), cfg.channels() * 2))).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Data(_)), "{msg}");
    assert!(msg.contains("conv1") && msg.contains("shape"), "{msg}");

    let first = student.store.entries().next().unwrap().name.clone();
    let kept: Vec<(&str, &stip_core::Tensor<f64>)> = student
        .store
        .entries()
        .filter(|e| e.name != first)
        .map(|e| (e.name.as_str(), &e.value))
        .collect();
    stip::formats::write_blob(&path, "checkpoint", &kept, serde_json::to_value(&meta).unwrap()).unwrap();
    let msg = load_student::<f64>(&path, None).unwrap_err().to_string();
    assert!(msg.contains(&format!("{first} missing")), "{msg}");

    let teacher_err = stip::harness::load_teacher::<f64>(&path).unwrap_err().to_string();
    assert!(teacher_err.contains("Teacher"), "{teacher_err}");
    student.store.zero_grad();
}

#[test]
fn csv_round_trip_keeps_quoting() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let rows = vec![vec!["a,b".to_string(), "1".to_string()], vec!["\"q\"".to_string(), "".to_string()]];
    write_csv(&path, &["name", "value"], &rows).unwrap();
    let (header, back) = read_csv(&path).unwrap();
    assert_eq!(header, ["name", "value"]);
    assert_eq!(back, rows);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = quick();
    assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
}
