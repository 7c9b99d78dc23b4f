//! Supervised training and evaluation on labelled, already-assembled inputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::metrics::Metrics;
use crate::model::{Classifier, ForwardOptions};
use crate::optim::{optimizer_step, OptimizerConfig};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `n` samples of shape `[seq_len, channels]` stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledSet<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 3 || inputs.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!("inputs {:?} for {} labels", inputs.shape(), labels.len()),
            ));
        }
        Ok(LabeledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize) {
        (self.inputs.shape()[1], self.inputs.shape()[2])
    }

    /// Gathers the samples at `indices` into one `[len(indices), L, C]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (l, c) = self.sample_shape();
        let stride = l * c;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(alloc::vec![indices.len(), l, c], data).expect("sizes agree"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (inputs, labels) = self.batch(indices);
        LabeledSet { inputs, labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::adam_amsgrad(1e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: Option<f64>,
}

/// Mean cross-entropy of `logits` `[B, K]` against integer labels.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {shape:?} for {} labels", labels.len())));
    }
    let k = shape[1];
    let mut onehot = Tensor::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        onehot.data_mut()[i * k + y] = T::one();
    }
    let logp = tape.log_softmax(logits, 1)?;
    let hot = tape.constant(onehot)?;
    let picked = tape.mul(hot, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -T::one() / T::lit(labels.len() as f64))
}

/// Minimizes cross-entropy with seeded per-epoch shuffling. A trailing batch
/// of a single sample is skipped, since batch normalization needs two.
pub fn train_classifier<T: Real, M: Classifier<T>>(
    model: &mut M,
    train: &LabeledSet<T>,
    valid: Option<&LabeledSet<T>>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.optimizer.validate()?;
    if config.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    if config.epochs > 0 && train.len() < 2 {
        return Err(Error::Data("training needs at least two samples".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = rng::permutation(train.len(), &mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let pass = model.forward(&mut tape, xv, ForwardOptions::train())?;
            let loss = cross_entropy(&mut tape, pass.logits, &y)?;
            let value = tape.value(loss).data()[0].as_f64();
            let diverged = |_| Error::Diverged {
                step,
                step_size: config.optimizer.learning_rate,
            };
            if !value.is_finite() {
                return Err(diverged(()));
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { .. } => diverged(()),
                e => e,
            })?;
            let store = model.store_mut();
            store.zero_grad();
            grads.accumulate_into(&tape, store)?;
            optimizer_step(store, &config.optimizer).map_err(|e| match e {
                Error::NonFinite { .. } => diverged(()),
                e => e,
            })?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let valid_accuracy = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, config.batch_size)?.accuracy),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            valid_accuracy,
        });
    }
    Ok(history)
}

/// Argmax class per sample, in inference mode.
pub fn predict<T: Real, M: Classifier<T>>(model: &mut M, data: &LabeledSet<T>, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        let p = model.predict_proba(&x)?;
        let k = p.last_dim();
        for row in p.data().chunks_exact(k) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real, M: Classifier<T>>(model: &mut M, test: &LabeledSet<T>, batch_size: usize) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    if test.sample_shape() != model.input_shape() {
        return Err(Error::shape(
            "evaluate",
            format!("model expects {:?}, data is {:?}", model.input_shape(), test.sample_shape()),
        ));
    }
    let predicted = predict(model, test, batch_size)?;
    Metrics::from_predictions(&predicted, &test.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::zeros(&[3, 4])).unwrap();
        let loss = cross_entropy(&mut tape, l, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::zeros(&[1, 2])).unwrap();
        assert!(cross_entropy(&mut tape, l, &[2]).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 1], |i| i as f64);
        let set = LabeledSet::new(x, alloc::vec![0, 1, 0]).unwrap();
        let (b, y) = set.batch(&[2, 0]);
        assert_eq!(b.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, [0, 0]);
    }
}
