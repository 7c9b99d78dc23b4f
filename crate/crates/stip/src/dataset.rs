//! Class selection, undersampling, stratified splitting and assembly of model
//! inputs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use stip_core::embed::{assemble, AssembleOptions, EmbeddingMatrix, Vocabulary};
use stip_core::rng;
use stip_core::scalar::Real;
use stip_core::tensor::Tensor;
use stip_core::train::LabeledSet;

use crate::error::{Error, Result};
use crate::formats::{Dataset, DatasetMeta};
use crate::preprocess::{TokenizedContract, VulnClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub vulnerable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class: VulnClass,
    pub samples: Vec<SampleRef>,
    pub split_seed: u64,
}

impl DatasetManifest {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.vulnerable).count()
    }

    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }
}

/// Keeps the contracts of `class` and undersamples the majority label
/// uniformly at random to the minority count. Corpus order is preserved.
pub fn balance(corpus: &[TokenizedContract], class: VulnClass, seed: u64) -> Result<DatasetManifest> {
    let of_class: Vec<&TokenizedContract> = corpus.iter().filter(|c| c.label.class == class).collect();
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..of_class.len()).partition(|&i| of_class[i].label.vulnerable);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "class {class} needs both labels, found {} vulnerable and {} clean",
            pos.len(),
            neg.len()
        )));
    }
    let keep = pos.len().min(neg.len());
    let mut rng = rng::seeded(rng::derive(seed, 0xba1a));
    let mut chosen = vec![];
    for group in [pos, neg] {
        if group.len() == keep {
            chosen.extend(group);
        } else {
            let order = rng::permutation(group.len(), &mut rng);
            chosen.extend(order[..keep].iter().map(|&i| group[i]));
        }
    }
    chosen.sort_unstable();
    Ok(DatasetManifest {
        class,
        samples: chosen
            .into_iter()
            .map(|i| SampleRef {
                id: of_class[i].id.clone(),
                vulnerable: of_class[i].label.vulnerable,
            })
            .collect(),
        split_seed: seed,
    })
}

/// Seeded stratified split: each label is shuffled and `round(ratio * n)`
/// of it (at least one, leaving at least one) goes to training.
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.samples.len() < 5 {
        return Err(Error::Data(format!("cannot split {} samples; need at least 5", manifest.samples.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut rng = rng::seeded(rng::derive(seed, 0x5b11));
    let mut train = vec![];
    let mut test = vec![];
    for label in [true, false] {
        let group: Vec<&SampleRef> = manifest.samples.iter().filter(|s| s.vulnerable == label).collect();
        let n = group.len();
        let mut n_train = (ratio * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        let order = rng::permutation(n, &mut rng);
        train.extend(order[..n_train].iter().map(|&i| group[i].clone()));
        test.extend(order[n_train..].iter().map(|&i| group[i].clone()));
    }
    let part = |samples| DatasetManifest {
        class: manifest.class,
        samples,
        split_seed: seed,
    };
    Ok((part(train), part(test)))
}

/// Embeds every sample of `manifest`, starting each at its first annotated
/// token. With `span_only`, only annotated tokens are kept.
pub fn assemble_dataset<T: Real>(
    manifest: &DatasetManifest,
    corpus: &[TokenizedContract],
    vocab: &Vocabulary,
    embedding: &EmbeddingMatrix,
    options: &AssembleOptions,
    span_only: bool,
) -> Result<Dataset<T>> {
    let by_id: HashMap<&str, &TokenizedContract> = corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let c = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Data(format!("sample {} is not in the corpus", s.id)))?;
        let x = if span_only {
            assemble(&c.span_tokens(), 0, vocab, embedding, options)?
        } else {
            assemble(&c.token_refs(), c.start_token(), vocab, embedding, options)?
        };
        samples.push(x);
    }
    let refs: Vec<&Tensor<T>> = samples.iter().collect();
    let inputs = if refs.is_empty() {
        Tensor::zeros(&[0, options.seq_len(), embedding.dim()])
    } else {
        Tensor::stack(&refs)?
    };
    let labels: Vec<usize> = manifest.samples.iter().map(|s| usize::from(s.vulnerable)).collect();
    Ok(Dataset {
        meta: DatasetMeta {
            count: labels.len(),
            n: options.n,
            k: options.k,
            channels: embedding.dim(),
            class: manifest.class,
            ids: manifest.samples.iter().map(|s| s.id.clone()).collect(),
            labels: labels.clone(),
        },
        set: LabeledSet::new(inputs, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Label;

    fn corpus(pos: usize, neg: usize) -> Vec<TokenizedContract> {
        (0..pos + neg)
            .map(|i| TokenizedContract {
                id: format!("c{i}"),
                tokens: vec!["x".into()],
                spans: vec![],
                label: Label {
                    class: VulnClass::Reentrancy,
                    vulnerable: i < pos,
                },
                warnings: vec![],
            })
            .collect()
    }

    #[test]
    fn undersamples_majority() {
        let m = balance(&corpus(100, 300), VulnClass::Reentrancy, 1).unwrap();
        assert_eq!((m.positives(), m.negatives()), (100, 100));
        assert_eq!(m, balance(&corpus(100, 300), VulnClass::Reentrancy, 1).unwrap());
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let c = corpus(4, 4);
        let m = balance(&c, VulnClass::Reentrancy, 9).unwrap();
        let ids: Vec<_> = m.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7"]);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(balance(&corpus(5, 0), VulnClass::Reentrancy, 0).is_err());
        assert!(balance(&corpus(5, 5), VulnClass::Timestamp, 0).is_err());
    }

    #[test]
    fn ten_samples_split_eight_two() {
        let m = balance(&corpus(5, 5), VulnClass::Reentrancy, 0).unwrap();
        let (train, test) = split(&m, 0.8, 3).unwrap();
        assert_eq!((train.samples.len(), test.samples.len()), (8, 2));
        assert_eq!((test.positives(), test.negatives()), (1, 1));
        assert_eq!(split(&m, 0.8, 3).unwrap(), (train, test));
    }

    #[test]
    fn tiny_sets_are_rejected() {
        let m = balance(&corpus(2, 2), VulnClass::Reentrancy, 0).unwrap();
        assert!(split(&m, 0.8, 0).is_err());
    }
}
