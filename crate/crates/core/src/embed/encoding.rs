use alloc::format;
use num_traits::Float;
use alloc::vec::Vec;

use super::cbow::EmbeddingMatrix;
use super::vocab::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Sinusoidal position table `[n, c]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/c))`, `PE[p, 2i+1] = cos(p / 10000^(2i/c))`.
pub fn positional_encoding<T: Real>(n: usize, c: usize) -> Result<Tensor<T>> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even width, got {c}")));
    }
    if n == 0 {
        return Err(Error::Config("positional encoding needs at least one position".into()));
    }
    Ok(Tensor::from_fn(&[n, c], |idx| {
        let (pos, j) = (idx / c, idx % c);
        let freq = Float::powf(10000f64, (j - j % 2) as f64 / c as f64);
        let angle = pos as f64 / freq;
        T::lit(if j % 2 == 0 { Float::sin(angle) } else { Float::cos(angle) })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepeatMode {
    /// `[A, B] -> [A, B, A, B]`
    #[default]
    Tile,
    /// `[A, B] -> [A, A, B, B]`
    Element,
}

/// Repeats the sequence axis (second to last) `k` times.
pub fn expand_repeat<T: Real>(x: &Tensor<T>, k: usize, mode: RepeatMode) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::Config("repeat factor must be at least 1".into()));
    }
    if x.rank() < 2 {
        return Err(Error::shape("expand_repeat", format!("need a sequence axis, got {:?}", x.shape())));
    }
    let shape = x.shape();
    let (n, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let outer: usize = shape[..shape.len() - 2].iter().product();
    let mut data = Vec::with_capacity(x.len() * k);
    for b in 0..outer {
        let seq = &x.data()[b * n * c..(b + 1) * n * c];
        match mode {
            RepeatMode::Tile => (0..k).for_each(|_| data.extend_from_slice(seq)),
            RepeatMode::Element => {
                for row in seq.chunks_exact(c) {
                    (0..k).for_each(|_| data.extend_from_slice(row));
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[shape.len() - 2] = n * k;
    Tensor::new(out_shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssembleOptions {
    /// Tokens kept per contract.
    pub n: usize,
    /// Repeat factor.
    pub k: usize,
    pub repeat: RepeatMode,
    /// Add the position table over all `n * k` rows after repeating instead
    /// of over `n` rows before.
    pub pe_after_repeat: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            n: 256,
            k: 2,
            repeat: RepeatMode::Tile,
            pe_after_repeat: false,
        }
    }
}

impl AssembleOptions {
    pub fn seq_len(&self) -> usize {
        self.n * self.k
    }
}

/// Builds one `[n * k, C]` model input: the `n` tokens from `start` on
/// (padded at the tail), looked up in `embedding`, plus positions, repeated.
pub fn assemble<T: Real>(
    tokens: &[&str],
    start: usize,
    vocab: &Vocabulary,
    embedding: &EmbeddingMatrix,
    options: &AssembleOptions,
) -> Result<Tensor<T>> {
    if options.n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if embedding.vocab_size() != vocab.len() {
        return Err(Error::shape(
            "assemble",
            format!("embedding has {} rows for {} tokens", embedding.vocab_size(), vocab.len()),
        ));
    }
    let c = embedding.dim();
    let start = start.min(tokens.len());
    let mut data = Vec::with_capacity(options.n * c);
    for i in 0..options.n {
        let idx = tokens.get(start + i).map(|t| vocab.lookup(t)).unwrap_or(PAD);
        data.extend(embedding.row(idx).iter().map(|&v| T::lit(v as f64)));
    }
    let mut x = Tensor::new(alloc::vec![options.n, c], data)?;
    let add_pe = |x: &mut Tensor<T>, rows: usize| -> Result<()> {
        let pe = positional_encoding::<T>(rows, c)?;
        for (v, &p) in x.data_mut().iter_mut().zip(pe.data()) {
            *v += p;
        }
        Ok(())
    };
    if options.pe_after_repeat {
        let mut out = expand_repeat(&x, options.k, options.repeat)?;
        add_pe(&mut out, options.seq_len())?;
        Ok(out)
    } else {
        add_pe(&mut x, options.n)?;
        expand_repeat(&x, options.k, options.repeat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn position_zero_and_one() {
        let pe = positional_encoding::<f64>(2, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 0.84147).abs() < 1e-5);
        assert!((pe.at(&[1, 2]) - (1.0f64 / 100.0).sin()).abs() < 1e-15);
        assert!(positional_encoding::<f64>(2, 3).is_err());
    }

    #[test]
    fn tile_and_element_repeat() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 1], &[1.0, 2.0]).unwrap();
        let t = expand_repeat(&x, 2, RepeatMode::Tile).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(t.shape(), &[1, 4, 1]);
        let e = expand_repeat(&x, 2, RepeatMode::Element).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(expand_repeat(&x, 1, RepeatMode::Tile).unwrap(), x);
        assert!(expand_repeat(&x, 0, RepeatMode::Tile).is_err());
    }

    fn toy() -> (Vocabulary, EmbeddingMatrix) {
        let vocab = Vocabulary::from_entries(vec![
            ("<pad>".to_string(), 0),
            ("<unk>".to_string(), 0),
            ("a".to_string(), 2),
            ("b".to_string(), 1),
        ])
        .unwrap();
        let vectors = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let emb = EmbeddingMatrix {
            vectors,
            vocab_hash: vocab.hash(),
            window: 1,
            negatives: 1,
            epochs: 1,
            seed: 0,
        };
        (vocab, emb)
    }

    #[test]
    fn hand_lookup_plus_positions() {
        let (vocab, emb) = toy();
        let opts = AssembleOptions {
            n: 4,
            k: 1,
            ..AssembleOptions::default()
        };
        let x = assemble::<f64>(&["b", "zzz", "a"], 0, &vocab, &emb, &opts).unwrap();
        let pe = positional_encoding::<f64>(4, 2).unwrap();
        let rows = [[4.0, 5.0], [1.0, 1.0], [2.0, 3.0], [0.0, 0.0]];
        for (p, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(x.at(&[p, j]), v + pe.at(&[p, j]));
            }
        }
    }

    #[test]
    fn empty_tokens_give_positions_only() {
        let (vocab, emb) = toy();
        let opts = AssembleOptions {
            n: 3,
            k: 2,
            ..AssembleOptions::default()
        };
        let x = assemble::<f64>(&[], 0, &vocab, &emb, &opts).unwrap();
        assert_eq!(x.shape(), &[6, 2]);
        let pe = positional_encoding::<f64>(3, 2).unwrap();
        assert_eq!(&x.data()[..6], pe.data());
        assert_eq!(&x.data()[6..], pe.data());
    }

    #[test]
    fn start_offset_skips_leading_tokens() {
        let (vocab, emb) = toy();
        let opts = AssembleOptions {
            n: 1,
            k: 1,
            ..AssembleOptions::default()
        };
        let x = assemble::<f64>(&["a", "b"], 1, &vocab, &emb, &opts).unwrap();
        assert_eq!(x.data(), &[4.0, 6.0]);
    }
}
