//! On-disk formats. Binary payloads are a JSON manifest next to a raw
//! little-endian blob named in the manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stip_core::embed::{EmbeddingMatrix, Vocabulary};
use stip_core::params::ParameterStore;
use stip_core::scalar::{DType, Real};
use stip_core::tensor::Tensor;
use stip_core::train::LabeledSet;

use crate::error::{Error, Result};
use crate::preprocess::{TokenizedContract, VulnClass};

pub const FORMAT_VERSION: u32 = 1;

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(Error::io(dir)),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(Error::io(path))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// One JSON record per line.
pub fn write_corpus(path: &Path, corpus: &[TokenizedContract]) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for c in corpus {
        serde_json::to_writer(&mut w, c).map_err(|e| Error::format(path, e))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenizedContract>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = vec![];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: TokenizedContract =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if let Some(s) = c.spans.iter().find(|s| s.start >= s.end || s.end > c.tokens.len()) {
            return Err(Error::format(path, format!("{}: span {}..{} out of range", c.id, s.start, s.end)));
        }
        out.push(c);
    }
    Ok(out)
}

/// `token<TAB>index<TAB>count` per line, in index order.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for (token, index, count) in vocab.entries() {
        text.push_str(&format!("{token}\t{index}\t{count}\n"));
    }
    write_text(path, &text)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut entries = vec![];
    for (n, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [token, index, count] = fields[..] else {
            return Err(bad("expected token<TAB>index<TAB>count"));
        };
        let index: usize = index.parse().map_err(|_| bad("bad index"))?;
        if index != n {
            return Err(bad("indices must be contiguous from 0"));
        }
        entries.push((token.to_string(), count.parse().map_err(|_| bad("bad count"))?));
    }
    Vocabulary::from_entries(entries).map_err(|e| Error::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub format_version: u32,
    pub kind: String,
    pub blob: String,
    pub entries: Vec<BlobEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.with_file_name(blob)
}

fn default_blob_name(manifest: &Path) -> String {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("blob");
    format!("{stem}.bin")
}

/// Writes named tensors as one manifest plus one blob.
pub fn write_blob<T: Real>(
    path: &Path,
    kind: &str,
    tensors: &[(&str, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    let blob = default_blob_name(path);
    let mut bytes = vec![];
    let mut entries = vec![];
    for &(name, t) in tensors {
        entries.push(BlobEntry {
            name: name.to_string(),
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    let manifest = BlobManifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        blob: blob.clone(),
        entries,
        meta,
    };
    write_json(path, &manifest)?;
    let bp = blob_path(path, &blob);
    fs::write(&bp, bytes).map_err(Error::io(&bp))
}

/// Reads a manifest of the expected `kind` and decodes every entry at
/// precision `T`, converting from the stored dtype when they differ.
pub fn read_blob<T: Real>(path: &Path, kind: &str) -> Result<(BlobManifest, Vec<(String, Tensor<T>)>)> {
    let manifest: BlobManifest = read_json(path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    if manifest.kind != kind {
        return Err(Error::format(path, format!("expected a {kind} file, found {}", manifest.kind)));
    }
    let bp = blob_path(path, &manifest.blob);
    let bytes = fs::read(&bp).map_err(Error::io(&bp))?;
    let mut out = vec![];
    for e in &manifest.entries {
        let dtype = DType::parse(&e.dtype).ok_or_else(|| Error::format(path, format!("{}: dtype {}", e.name, e.dtype)))?;
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * dtype.size();
        let raw = bytes
            .get(e.offset..end)
            .ok_or_else(|| Error::format(&bp, format!("{} runs past the end of the blob", e.name)))?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Saves every entry of `store` (parameters and buffers) in insertion order.
pub fn write_checkpoint<T: Real>(path: &Path, store: &ParameterStore<T>, meta: serde_json::Value) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<T>)> = store.entries().map(|e| (e.name.as_str(), &e.value)).collect();
    write_blob(path, "checkpoint", &tensors, meta)
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<T>)>)> {
    let (manifest, tensors) = read_blob(path, "checkpoint")?;
    Ok((manifest.meta, tensors))
}

/// Loads every entry of `store` from `tensors`. Fails, naming each offending
/// tensor, unless all entries are present with matching shapes.
pub fn load_into_store<T: Real>(store: &mut ParameterStore<T>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut problems = vec![];
    for e in store.entries() {
        match tensors.iter().find(|(n, _)| *n == e.name) {
            None => problems.push(format!("{} missing", e.name)),
            Some((_, t)) if t.shape() != e.value.shape() => {
                problems.push(format!("{} has shape {:?}, expected {:?}", e.name, t.shape(), e.value.shape()))
            }
            _ => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!("checkpoint does not fit the model: {}", problems.join("; "))));
    }
    for (name, t) in tensors {
        if store.id(name).is_some() {
            store.set(name, t.clone())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingMeta {
    vocab_size: usize,
    dim: usize,
    vocab_hash: String,
    window: usize,
    negatives: usize,
    epochs: usize,
    seed: u64,
}

pub fn write_embedding(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    let meta = EmbeddingMeta {
        vocab_size: emb.vocab_size(),
        dim: emb.dim(),
        vocab_hash: format!("{:016x}", emb.vocab_hash),
        window: emb.window,
        negatives: emb.negatives,
        epochs: emb.epochs,
        seed: emb.seed,
    };
    let meta = serde_json::to_value(meta).expect("plain struct serializes");
    write_blob(path, "embedding", &[("vectors", &emb.vectors)], meta)
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingMatrix> {
    let (manifest, mut tensors) = read_blob::<f32>(path, "embedding")?;
    let meta: EmbeddingMeta = serde_json::from_value(manifest.meta).map_err(|e| Error::format(path, e))?;
    let (_, vectors) = tensors.pop().ok_or_else(|| Error::format(path, "no vectors"))?;
    if vectors.shape() != [meta.vocab_size, meta.dim] {
        return Err(Error::format(path, format!("vectors {:?} disagree with the manifest", vectors.shape())));
    }
    Ok(EmbeddingMatrix {
        vectors,
        vocab_hash: u64::from_str_radix(&meta.vocab_hash, 16).map_err(|e| Error::format(path, e))?,
        window: meta.window,
        negatives: meta.negatives,
        epochs: meta.epochs,
        seed: meta.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub n: usize,
    pub k: usize,
    pub channels: usize,
    pub class: VulnClass,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Assembled samples `[count, n * k, C]` with their source ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub meta: DatasetMeta,
    pub set: LabeledSet<T>,
}

pub fn write_dataset<T: Real>(path: &Path, data: &Dataset<T>) -> Result<()> {
    let meta = serde_json::to_value(&data.meta).expect("plain struct serializes");
    write_blob(path, "dataset", &[("samples", &data.set.inputs)], meta)
}

pub fn read_dataset<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let (manifest, mut tensors) = read_blob::<T>(path, "dataset")?;
    let meta: DatasetMeta = serde_json::from_value(manifest.meta).map_err(|e| Error::format(path, e))?;
    let (_, inputs) = tensors.pop().ok_or_else(|| Error::format(path, "no samples"))?;
    if inputs.shape() != [meta.count, meta.n * meta.k, meta.channels] || meta.ids.len() != meta.count {
        return Err(Error::format(path, "samples disagree with the manifest"));
    }
    let set = LabeledSet::new(inputs, meta.labels.clone())?;
    Ok(Dataset { meta, set })
}

/// Writes a CSV file with a header row. Every row must have the header's width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(header).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?.iter().map(String::from).collect();
    let mut rows = vec![];
    for rec in r.records() {
        rows.push(rec.map_err(|e| Error::format(path, e))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
