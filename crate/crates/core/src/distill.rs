//! Data-free knowledge distillation.
//!
//! The teacher's batch-normalization running statistics stand in for the
//! activations of real data. Pseudo-samples start as Gaussian noise and are
//! optimized directly, by gradient descent on the input, until the batch
//! statistics they induce at the teacher's normalization layers match the
//! stored ones. The student is then fit to the teacher's softened outputs
//! (KL term) and hard pseudo-labels (cross-entropy term) on those samples.
//! Nothing in this module takes a dataset.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{Classifier, ForwardOptions, TeacherModel};
use crate::nn::NormTap;
use crate::optim::{optimizer_step, OptimizerConfig};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Mean and standard deviation of the initial noise.
    pub mu: f64,
    pub sigma: f64,
    /// Step size for the input updates.
    pub eta: f64,
    pub synth_steps: usize,
    pub temperature: f64,
    /// Weight of the KL term; the cross-entropy term gets `1 - alpha`.
    pub alpha: f64,
    pub batch: usize,
    /// Student update steps.
    pub steps: usize,
    /// A fresh pseudo-batch is synthesized every this many steps.
    pub refresh_every: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step halvings tried when an input update increases the loss.
    pub max_backtracks: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mu: 0.0,
            sigma: 1.0,
            eta: 0.05,
            synth_steps: 200,
            temperature: 4.0,
            alpha: 0.2,
            batch: 64,
            steps: 200,
            refresh_every: 10,
            learning_rate: 1e-3,
            momentum: 0.9,
            max_backtracks: 20,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(String::from(m)));
        if !(self.sigma >= 0.0) || !self.mu.is_finite() {
            return bad("noise sigma must be >= 0 and mu finite");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.eta > 0.0) {
            return bad("synthesis step size must be > 0");
        }
        if self.batch < 2 || self.refresh_every == 0 {
            return bad("pseudo-batch needs at least two samples and refresh_every > 0");
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::sgd_momentum(self.learning_rate, self.momentum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel targets for every normalization layer up to the tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStats<T> {
    pub layers: Vec<LayerStats<T>>,
}

/// Reads the running statistics of the teacher's normalization layers up to
/// and including the tap block. Fails if any of them never saw a batch.
pub fn capture_target_stats<T: Real>(teacher: &TeacherModel<T>) -> Result<TargetStats<T>> {
    let mut layers = Vec::new();
    for block in teacher.tapped_norms() {
        let norm = &block.norm;
        if norm.batches_seen(&teacher.store) == 0 {
            return Err(Error::Untrained(format!("`{}` has no running statistics", norm.name)));
        }
        let (mean, var) = norm.running_stats(&teacher.store);
        layers.push(LayerStats {
            layer: norm.name.clone(),
            mean,
            var,
        });
    }
    Ok(TargetStats { layers })
}

/// Statistic matching loss: for every tapped layer,
/// `(1/C) * sum_c [(mean_c - target_mean_c)^2 + (var_c - target_var_c)^2]`,
/// summed over layers. Variances are unbiased, like the running ones.
pub fn stat_matching_loss<T: Real>(tape: &mut Tape<T>, taps: &[NormTap], target: &TargetStats<T>) -> Result<Var> {
    if taps.len() < target.layers.len() {
        return Err(Error::shape(
            "stat_matching_loss",
            format!("{} normalization inputs for {} target layers", taps.len(), target.layers.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (tap, stats) in taps.iter().zip(&target.layers) {
        let shape = tape.shape(tap.input).to_vec();
        let c = *shape.last().unwrap_or(&1);
        if stats.mean.len() != c {
            return Err(Error::shape("stat_matching_loss", format!("layer `{}` has {c} channels", stats.layer)));
        }
        let rank = shape.len();
        let axes: Vec<usize> = (0..rank - 1).collect();
        let rows = shape.iter().product::<usize>() / c;
        let mut stat_shape = vec![1; rank];
        stat_shape[rank - 1] = c;

        let mean = tape.mean_axes(tap.input, &axes)?;
        let centered = tape.sub(tap.input, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_axes(sq, &axes)?;
        let var = tape.scale(var, T::lit(rows as f64 / (rows as f64 - 1.0).max(1.0)))?;

        let tm = tape.constant(Tensor::new(stat_shape.clone(), stats.mean.clone())?)?;
        let tv = tape.constant(Tensor::new(stat_shape, stats.var.clone())?)?;
        let dm = tape.sub(mean, tm)?;
        let dv = tape.sub(var, tv)?;
        let dm = tape.square(dm)?;
        let dv = tape.square(dv)?;
        let both = tape.add(dm, dv)?;
        let layer = tape.sum(both)?;
        let layer = tape.scale(layer, T::one() / T::lit(c as f64))?;
        total = Some(match total {
            Some(t) => tape.add(t, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::Untrained(String::from("teacher has no normalization layers to match")))
}

#[derive(Debug, Clone)]
pub struct Synthesis<T> {
    pub samples: Tensor<T>,
    /// Loss before each accepted step, followed by the final loss.
    pub losses: Vec<f64>,
    pub step_size: f64,
}

impl<T> Synthesis<T> {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

struct Evaluated<T> {
    tape: Tape<T>,
    input: Var,
    loss: Var,
    value: f64,
}

fn evaluate_stats<T: Real>(teacher: &mut TeacherModel<T>, z: &Tensor<T>, target: &TargetStats<T>) -> Result<Evaluated<T>> {
    let mut tape = Tape::new();
    let input = tape.input(z.clone())?;
    let opts = ForwardOptions {
        record_norm_inputs: true,
        ..ForwardOptions::infer()
    };
    let pass = teacher.forward(&mut tape, input, opts)?;
    let loss = stat_matching_loss(&mut tape, &pass.norm_taps, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    Ok(Evaluated { tape, input, loss, value })
}

/// Optimizes pseudo-samples `z` by `z <- z - eta * dL/dz` on the statistic
/// matching loss. A step that would raise the loss is retried with half the
/// step size (up to `max_backtracks` times); the reduced step size is kept.
/// Teacher parameters are only read.
pub fn synthesize_pseudo<T: Real>(
    teacher: &mut TeacherModel<T>,
    z: Tensor<T>,
    target: &TargetStats<T>,
    config: &DistillConfig,
) -> Result<Synthesis<T>> {
    let diverged = |step: usize, eta: f64| move |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { step, step_size: eta },
        other => other,
    };
    let mut eta = config.eta;
    let mut current = evaluate_stats(teacher, &z, target).map_err(diverged(0, eta))?;
    let mut z = z;
    let mut losses = vec![current.value];
    for step in 0..config.synth_steps {
        let grads = current.tape.backward(current.loss).map_err(diverged(step, eta))?;
        let Some(g) = grads.get(current.input) else { break };
        let g = g.clone();
        let mut accepted = None;
        for attempt in 0..=config.max_backtracks {
            let step_t = T::lit(eta);
            let mut candidate = z.clone();
            for (v, &d) in candidate.data_mut().iter_mut().zip(g.data()) {
                *v -= step_t * d;
            }
            let eval = match evaluate_stats(teacher, &candidate, target) {
                Ok(e) => e,
                Err(Error::NonFinite { .. }) if attempt < config.max_backtracks => {
                    eta *= 0.5;
                    continue;
                }
                Err(e) => return Err(diverged(step, eta)(e)),
            };
            if eval.value <= current.value || attempt == config.max_backtracks {
                accepted = Some((candidate, eval));
                break;
            }
            eta *= 0.5;
        }
        let (candidate, eval) = accepted.expect("loop always accepts on the last attempt");
        if !eval.value.is_finite() {
            return Err(Error::Diverged { step, step_size: eta });
        }
        if eval.value > current.value {
            // No decreasing step exists at this resolution; stop here.
            break;
        }
        z = candidate;
        current = eval;
        losses.push(current.value);
    }
    Ok(Synthesis {
        samples: z,
        losses,
        step_size: eta,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct KdLosses {
    pub kl: Var,
    pub clf: Var,
    pub total: Var,
    /// Some teacher probabilities were at or below zero and were clamped.
    pub clamped: bool,
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Distillation losses for one batch.
///
/// * `kl = mean_b sum_i p_t log(p_t / p_s)` with `p_s = softmax(logits / T)`
/// * `clf = mean_b -log softmax(logits)[argmax p_t]`
/// * `total = alpha * kl + (1 - alpha) * clf`
pub fn kd_losses<T: Real>(
    tape: &mut Tape<T>,
    teacher_probs: &Tensor<T>,
    student_logits: Var,
    temperature: f64,
    alpha: f64,
) -> Result<KdLosses> {
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 || teacher_probs.shape() != shape.as_slice() {
        return Err(Error::shape(
            "kd_losses",
            format!("teacher {:?} vs student {shape:?}", teacher_probs.shape()),
        ));
    }
    if !(temperature > 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("temperature {temperature} / alpha {alpha} out of range")));
    }
    let (b, k) = (shape[0], shape[1]);
    let floor = T::lit(PROB_FLOOR);
    let clamped = teacher_probs.data().iter().any(|&p| p <= T::zero());
    let pt = teacher_probs.map(|p| p.max(floor));
    let entropy_term: T = pt.data().iter().map(|&p| p * p.ln()).sum();

    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, row) in teacher_probs.data().chunks_exact(k).enumerate() {
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        onehot.data_mut()[i * k + best] = T::one();
    }

    let inv_b = T::one() / T::lit(b as f64);
    let soft = tape.scale(student_logits, T::one() / T::lit(temperature))?;
    let log_ps = tape.log_softmax(soft, 1)?;
    let pt_var = tape.constant(pt)?;
    let cross = tape.mul(pt_var, log_ps)?;
    let cross = tape.sum(cross)?;
    let ent = tape.constant(Tensor::scalar(entropy_term))?;
    let kl = tape.sub(ent, cross)?;
    let kl = tape.scale(kl, inv_b)?;

    let log_p1 = tape.log_softmax(student_logits, 1)?;
    let hot = tape.constant(onehot)?;
    let picked = tape.mul(hot, log_p1)?;
    let picked = tape.sum(picked)?;
    let clf = tape.scale(picked, -inv_b)?;

    let a = T::lit(alpha);
    let wk = tape.scale(kl, a)?;
    let wc = tape.scale(clf, T::one() - a)?;
    let total = tape.add(wk, wc)?;
    Ok(KdLosses { kl, clf, total, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillRecord {
    pub step: usize,
    pub l_mse: f64,
    pub l_kl: f64,
    pub l_clf: f64,
    pub l_concat: f64,
}

/// Teacher probabilities softened by `temperature`, in inference mode.
pub fn teacher_soft_targets<T: Real>(teacher: &mut TeacherModel<T>, x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let input = tape.constant(x.clone())?;
    let pass = teacher.forward(&mut tape, input, ForwardOptions::infer())?;
    let soft = tape.scale(pass.logits, T::one() / T::lit(temperature))?;
    let p = tape.softmax(soft, 1)?;
    Ok(tape.value(p).clone())
}

/// Trains `student` from `teacher` without any data: every batch is
/// synthesized from noise. Returns one record per student step.
pub fn distill_student<T: Real, S: Classifier<T>>(
    teacher: &mut TeacherModel<T>,
    student: &mut S,
    config: &DistillConfig,
    seed: u64,
) -> Result<Vec<DistillRecord>> {
    config.validate()?;
    let (len, ch) = teacher.input_shape();
    if student.input_shape() != (len, ch) {
        return Err(Error::shape(
            "distill_student",
            format!("teacher input {:?} vs student input {:?}", (len, ch), student.input_shape()),
        ));
    }
    let target = capture_target_stats(teacher)?;
    let optimizer = config.optimizer();
    let mut rng = rng::seeded(seed);
    let mut history = Vec::with_capacity(config.steps);
    let mut pseudo: Option<(Tensor<T>, Tensor<T>, f64)> = None;
    for step in 0..config.steps {
        if step % config.refresh_every == 0 || pseudo.is_none() {
            let z0 = rng::normal_tensor(&[config.batch, len, ch], config.mu, config.sigma, &mut rng);
            let synth = synthesize_pseudo(teacher, z0, &target, config)?;
            let probs = teacher_soft_targets(teacher, &synth.samples, config.temperature)?;
            let l_mse = synth.final_loss();
            pseudo = Some((synth.samples, probs, l_mse));
        }
        let (samples, probs, l_mse) = pseudo.as_ref().unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(samples.clone())?;
        let pass = student.forward(&mut tape, x, ForwardOptions::train())?;
        let kd = kd_losses(&mut tape, probs, pass.logits, config.temperature, config.alpha)?;
        let grads = tape.backward(kd.total)?;
        let store = student.store_mut();
        store.zero_grad();
        grads.accumulate_into(&tape, store)?;
        optimizer_step(store, &optimizer)?;

        let v = |var: Var| tape.value(var).data()[0].as_f64();
        history.push(DistillRecord {
            step,
            l_mse: *l_mse,
            l_kl: v(kd.kl),
            l_clf: v(kd.clf),
            l_concat: v(kd.total),
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(pt: &[f64], logits: &[f64], t: f64, alpha: f64) -> (f64, f64, f64) {
        let b = pt.len() / 2;
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::from_f64(&[b, 2], logits).unwrap()).unwrap();
        let p = Tensor::from_f64(&[b, 2], pt).unwrap();
        let kd = kd_losses(&mut tape, &p, l, t, alpha).unwrap();
        let v = |x: Var| tape.value(x).data()[0];
        (v(kd.kl), v(kd.clf), v(kd.total))
    }

    #[test]
    fn kl_hand_case() {
        // 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let (kl, _, _) = losses(&[0.9, 0.1], &[0.0, 0.0], 1.0, 0.5);
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn identical_distributions_have_zero_kl() {
        let logits = [0.3f64, -1.2];
        let m = logits[0].max(logits[1]);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let (kl, _, _) = losses(&p, &logits, 1.0, 0.5);
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        let (pt, lg) = ([0.7, 0.3, 0.2, 0.8], [0.4, -0.3, 1.1, 0.2]);
        let (kl, _, total) = losses(&pt, &lg, 4.0, 1.0);
        assert_eq!(total.to_bits(), kl.to_bits());
        let (_, clf, total) = losses(&pt, &lg, 4.0, 0.0);
        assert_eq!(total.to_bits(), clf.to_bits());
    }

    #[test]
    fn zero_teacher_probabilities_are_clamped() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let p = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let kd = kd_losses(&mut tape, &p, l, 1.0, 0.5).unwrap();
        assert!(kd.clamped);
        assert!(tape.value(kd.kl).data()[0].is_finite());
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let (_, clf, _) = losses(&[0.5, 0.5, 0.5, 0.5], &[0.0, 0.0, 0.0, 0.0], 4.0, 0.0);
        assert!((clf - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let mut c = DistillConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        c = DistillConfig::default();
        c.sigma = -1.0;
        assert!(c.validate().is_err());
        c = DistillConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }
}
