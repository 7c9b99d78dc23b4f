use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbowConfig {
    pub dim: usize,
    /// Context tokens taken on each side of the center.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to near zero over training.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 300,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Word vectors, one row per vocabulary index. Row 0 (padding) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Tensor<f32>,
    pub vocab_hash: u64,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl EmbeddingMatrix {
    pub fn vocab_size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let c = self.dim();
        &self.vectors.data()[index * c..(index + 1) * c]
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| p as f64 * p as f64).sum::<f64>();
        let ny: f64 = y.iter().map(|&q| q as f64 * q as f64).sum::<f64>();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / Float::sqrt(nx * ny)
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.vectors.cast()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbowRun {
    pub embedding: EmbeddingMatrix,
    /// Mean negative-sampling loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

/// Continuous bag-of-words with negative sampling. The mean of the context
/// vectors predicts the center token against `negatives` noise tokens drawn
/// from the unigram distribution raised to 3/4. Padding never acts as a
/// center, context or noise token, and windows do not cross documents.
pub fn train_cbow(documents: &[Vec<usize>], vocab_size: usize, vocab_hash: u64, config: &CbowConfig) -> Result<CbowRun> {
    if config.window == 0 || config.negatives == 0 || config.dim == 0 {
        return Err(Error::Config("window, negatives and dim must be positive".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be > 0".into()));
    }
    let mut counts = vec![0u64; vocab_size];
    for &t in documents.iter().flatten() {
        if t >= vocab_size {
            return Err(Error::Data(format!("token index {t} outside vocabulary of {vocab_size}")));
        }
        counts[t] += 1;
    }
    counts[PAD] = 0;
    let total: u64 = counts.iter().sum();
    if (total as usize) < 2 * config.window + 1 {
        return Err(Error::Data(format!(
            "corpus has {total} tokens, need at least {} for window {}",
            2 * config.window + 1,
            config.window
        )));
    }

    let mut cumulative = Vec::with_capacity(vocab_size);
    let mut acc = 0.0f64;
    for &c in &counts {
        acc += Float::powf(c as f64, 0.75);
        cumulative.push(acc);
    }

    let dim = config.dim;
    let mut rng = rng::seeded(config.seed);
    let bound = 0.5 / dim as f32;
    let mut input: Vec<f32> = (0..vocab_size * dim).map(|_| rng.random_range(-bound..bound)).collect();
    input[PAD * dim..(PAD + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
    let mut output = vec![0.0f32; vocab_size * dim];

    let planned = (total as usize * config.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut hidden = vec![0.0f32; dim];
    let mut err = vec![0.0f32; dim];
    let mut context = Vec::with_capacity(2 * config.window);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let (mut loss_sum, mut examples) = (0.0f64, 0usize);
        for doc in documents {
            for (pos, &center) in doc.iter().enumerate() {
                if center == PAD {
                    continue;
                }
                let lr = (config.learning_rate * (1.0 - processed as f64 / planned)).max(config.learning_rate * 1e-4) as f32;
                processed += 1;
                context.clear();
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(doc.len());
                context.extend((lo..hi).filter(|&j| j != pos && doc[j] != PAD).map(|j| doc[j]));
                if context.is_empty() {
                    continue;
                }
                hidden.iter_mut().for_each(|h| *h = 0.0);
                for &w in &context {
                    for (h, &v) in hidden.iter_mut().zip(&input[w * dim..(w + 1) * dim]) {
                        *h += v;
                    }
                }
                let inv = 1.0 / context.len() as f32;
                hidden.iter_mut().for_each(|h| *h *= inv);
                err.iter_mut().for_each(|e| *e = 0.0);

                for d in 0..=config.negatives {
                    let (target, label) = if d == 0 {
                        (center, 1.0f32)
                    } else {
                        let r = rng.random::<f64>() * acc;
                        let t = cumulative.partition_point(|&c| c <= r).min(vocab_size - 1);
                        if t == center || t == PAD {
                            continue;
                        }
                        (t, 0.0f32)
                    };
                    let out = &mut output[target * dim..(target + 1) * dim];
                    let score: f32 = hidden.iter().zip(out.iter()).map(|(&h, &o)| h * o).sum();
                    let p = sigmoid(score);
                    let prob = if label == 1.0 { p } else { 1.0 - p };
                    loss_sum -= Float::ln((prob as f64).max(1e-10));
                    let g = (label - p) * lr;
                    for ((e, o), &h) in err.iter_mut().zip(out.iter_mut()).zip(&hidden) {
                        *e += g * *o;
                        *o += g * h;
                    }
                }
                examples += 1;
                for &w in &context {
                    for (v, &e) in input[w * dim..(w + 1) * dim].iter_mut().zip(&err) {
                        *v += e;
                    }
                }
            }
        }
        epoch_losses.push(if examples > 0 { loss_sum / examples as f64 } else { 0.0 });
    }

    let vectors = Tensor::new(vec![vocab_size, dim], input)?;
    if !vectors.is_finite() {
        return Err(Error::NonFinite { op: "train_cbow" });
    }
    Ok(CbowRun {
        embedding: EmbeddingMatrix {
            vectors,
            vocab_hash,
            window: config.window,
            negatives: config.negatives,
            epochs: config.epochs,
            seed: config.seed,
        },
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tokens 2,3 only appear together, as do 4,5; 6 is filler.
    fn paired_corpus(seed: u64) -> Vec<Vec<usize>> {
        let mut rng = rng::seeded(seed);
        (0..200)
            .map(|_| {
                let pair = if rng.random::<bool>() { [2, 3] } else { [4, 5] };
                let mut doc = Vec::new();
                for _ in 0..25 {
                    doc.push(pair[rng.random_range(0..2)]);
                    if rng.random::<f64>() < 0.2 {
                        doc.push(6);
                    }
                }
                doc
            })
            .collect()
    }

    fn config() -> CbowConfig {
        CbowConfig {
            dim: 16,
            window: 2,
            epochs: 5,
            seed: 3,
            ..CbowConfig::default()
        }
    }

    #[test]
    fn co_occurring_tokens_end_up_closer() {
        let run = train_cbow(&paired_corpus(1), 7, 0, &config()).unwrap();
        let e = &run.embedding;
        assert!(e.cosine(2, 3) > e.cosine(2, 4));
        assert!(e.cosine(4, 5) > e.cosine(4, 2));
        assert!(run.epoch_losses.last().unwrap() < &run.epoch_losses[0]);
    }

    #[test]
    fn deterministic_and_pad_stays_zero() {
        let docs = paired_corpus(2);
        let a = train_cbow(&docs, 7, 0, &config()).unwrap();
        let b = train_cbow(&docs, 7, 0, &config()).unwrap();
        assert_eq!(a, b);
        assert!(a.embedding.row(PAD).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_corpus_is_finite() {
        let docs = vec![vec![2usize; 50]];
        let run = train_cbow(&docs, 3, 0, &config()).unwrap();
        assert!(run.embedding.vectors.is_finite());
    }

    #[test]
    fn short_corpus_is_an_error() {
        assert!(train_cbow(&[vec![2, 3, 4]], 5, 0, &config()).is_err());
    }
}
