//! Finite-difference verification of tape gradients.
//!
//! Analytic gradients are computed at the store's precision. The reference is
//! a central difference evaluated in `f64` at the same point, so a 32-bit
//! check measures the 32-bit backward pass rather than 32-bit cancellation
//! in the difference quotient.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::distill::{kd_losses, stat_matching_loss, LayerStats, TargetStats};
use crate::error::Result;
use crate::fusion::{AdaptiveFusion, ExternalMemory, FusionConfig, Mdqe, MultiStage, Psa};
use crate::graph::{Padding, Tape, Var};
use crate::nn::{BatchNorm, Conv1d, Ctx, Dense, Mode, NormTap};
use crate::params::{ParamId, ParameterStore};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A scalar function of some input tensors and the parameters in a store.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub floor: f64,
    /// Coordinates whose one-sided slopes disagree by more than this
    /// (relative) straddle a kink (ReLU, max) and are skipped.
    pub kink: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-2,
            kink: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `tensor[index]`.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_f64<O: Objective>(obj: &O, store: &mut ParameterStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
    let loss = obj.eval(&mut tape, store, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares every input and trainable-parameter coordinate.
pub fn check_gradients<T: Real, O: Objective>(
    obj: &O,
    store: &ParameterStore<T>,
    inputs: &[Tensor<T>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.input(x.clone())).collect::<Result<Vec<_>>>()?;
    let loss = obj.eval(&mut tape, &mut work, &vars)?;
    let grads = tape.backward(loss)?;
    work.zero_grad();
    grads.accumulate_into(&tape, &mut work)?;

    // (label, analytic gradient) per checked tensor, inputs first.
    let mut targets: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(|g| g.data().iter().map(|x| x.as_f64()).collect());
        targets.push((format!("input{i}"), g.unwrap_or_else(|| alloc::vec![0.0; inputs[i].len()])));
    }
    for e in work.entries().filter(|e| e.trainable) {
        targets.push((e.name.clone(), e.grad.data().iter().map(|x| x.as_f64()).collect()));
    }

    let mut store64: ParameterStore<f64> = store.cast();
    let mut inputs64: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
    let h = config.step;
    let f0 = eval_f64(obj, &mut store64, &inputs64)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for (t, (label, analytic)) in targets.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let mut probe = |delta: f64| -> Result<f64> {
                let slot = if t < inputs64.len() {
                    &mut inputs64[t].data_mut()[j]
                } else {
                    let id = store64.id(&targets[t].0).expect("name from the same store");
                    &mut store64.value_mut(id).data_mut()[j]
                };
                let saved = *slot;
                *slot = saved + delta;
                let out = eval_f64(obj, &mut store64, &inputs64);
                let slot = if t < inputs64.len() {
                    &mut inputs64[t].data_mut()[j]
                } else {
                    let id = store64.id(&targets[t].0).expect("name from the same store");
                    &mut store64.value_mut(id).data_mut()[j]
                };
                *slot = saved;
                out
            };
            let (fp, fm) = (probe(h)?, probe(-h)?);
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if relative_error(right, left, config.floor) > config.kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{label}[{j}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}

enum Subject {
    Conv(Conv1d),
    Dense(Dense),
    Norm(BatchNorm),
    Activations,
    Mdqe(Mdqe),
    Memory(ExternalMemory),
    MultiStage(MultiStage),
    Fusion(AdaptiveFusion),
    Psa(Psa),
    Distill { teacher_probs: Tensor<f64> },
    StatMatch { target_mean: Vec<f64>, target_var: Vec<f64> },
}

/// One layer under test, reduced to a scalar by a fixed random projection.
struct Case {
    subject: Subject,
    projection: Option<Tensor<f64>>,
}

impl Case {
    fn output<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, x: Var) -> Result<Var> {
        let mut ctx = Ctx::new(tape, store, Mode::Train);
        match &self.subject {
            Subject::Conv(l) => l.forward(&mut ctx, x),
            Subject::Dense(l) => l.forward(&mut ctx, x),
            Subject::Norm(l) => l.forward(&mut ctx, x),
            Subject::Activations => {
                let r = ctx.tape.relu(x)?;
                let s = ctx.tape.sigmoid(x)?;
                let both = ctx.tape.add(r, s)?;
                ctx.tape.softmax(both, 2)
            }
            Subject::Mdqe(l) => Ok(l.forward(&mut ctx, x)?.out),
            Subject::Memory(l) => Ok(l.forward(&mut ctx, x)?.out),
            Subject::MultiStage(l) => l.forward(&mut ctx, x),
            Subject::Fusion(l) => Ok(l.forward(&mut ctx, x)?.fused),
            Subject::Psa(l) => Ok(l.forward(&mut ctx, x)?.out),
            Subject::Distill { teacher_probs } => {
                let kd = kd_losses(ctx.tape, &teacher_probs.cast(), x, 4.0, 0.2)?;
                Ok(kd.total)
            }
            Subject::StatMatch { target_mean, target_var } => {
                let target = TargetStats {
                    layers: alloc::vec![LayerStats {
                        layer: String::from("probe"),
                        mean: target_mean.iter().map(|&v| T::lit(v)).collect(),
                        var: target_var.iter().map(|&v| T::lit(v)).collect(),
                    }],
                };
                let tap = NormTap {
                    layer: String::from("probe"),
                    input: x,
                    running_mean: ParamId(0),
                    running_var: ParamId(0),
                };
                stat_matching_loss(ctx.tape, &[tap], &target)
            }
        }
    }
}

impl Objective for Case {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, inputs: &[Var]) -> Result<Var> {
        let out = self.output(tape, store, inputs[0])?;
        match &self.projection {
            Some(r) => {
                let r = tape.constant(r.cast())?;
                let weighted = tape.mul(out, r)?;
                tape.sum(weighted)
            }
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Input shape used by [`layer_suite`]: batch 2, length 8, 8 channels.
/// Inputs are drawn from `N(0, 0.25^2)`, small enough that the attention
/// softmaxes in the staged pyramid stay away from saturation.
const INPUT_STD: f64 = 0.25;

pub const SUITE_SHAPE: [usize; 3] = [2, 8, 8];

/// Gradient checks for every layer type the networks use, at precision `T`.
pub fn layer_suite<T: Real>(seed: u64, config: &GradCheckConfig) -> Result<Vec<SuiteCase>> {
    let [b, l, c] = SUITE_SHAPE;
    let mut rng = rng::seeded(seed);
    let fusion = FusionConfig {
        numhead: 4,
        groups: 2,
        memory_slots: 16,
        memory_dim: None,
        stages: 2,
        mb_expansion: 2,
        mlp_ratio: 2,
    };
    let mut cases: Vec<(&'static str, Box<dyn Fn(&mut ParameterStore<f64>) -> Result<Subject>>, Vec<usize>)> = Vec::new();
    cases.push(("conv1d", Box::new(move |s| Ok(Subject::Conv(Conv1d::new(s, "conv", c, c, 3, Padding::Same, 1)?))), alloc::vec![b, l, c]));
    cases.push(("dense", Box::new(move |s| Ok(Subject::Dense(Dense::new(s, "dense", c, 4, true)?))), alloc::vec![b, l, c]));
    cases.push(("batchnorm", Box::new(move |s| Ok(Subject::Norm(BatchNorm::new(s, "norm", c, 0.1)?))), alloc::vec![b, l, c]));
    cases.push(("relu_softmax", Box::new(|_| Ok(Subject::Activations)), alloc::vec![b, l, c]));
    cases.push(("mdqe", Box::new(move |s| Ok(Subject::Mdqe(Mdqe::new(s, "mdqe", c, &fusion)?))), alloc::vec![b, l, c]));
    cases.push((
        "external_memory",
        Box::new(move |s| Ok(Subject::Memory(ExternalMemory::new(s, "memory", c, fusion.memory_slots, c)?))),
        alloc::vec![b, l, c],
    ));
    cases.push((
        "multistage_fusion",
        Box::new(move |s| Ok(Subject::MultiStage(MultiStage::new(s, "multistage", c, &fusion)?))),
        alloc::vec![b, l, c],
    ));
    cases.push((
        "adaptive_fusion",
        Box::new(move |s| Ok(Subject::Fusion(AdaptiveFusion::new(s, "block", c, fusion)?))),
        alloc::vec![b, l, c],
    ));
    cases.push(("psa", Box::new(move |s| Ok(Subject::Psa(Psa::new(s, "psa", c, 4)?))), alloc::vec![b, l, c]));

    let mut probs = rng::normal_tensor::<f64>(&[b, 2], 0.0, 1.0, &mut rng);
    for row in probs.data_mut().chunks_exact_mut(2) {
        let m = row[0].max(row[1]);
        let z: f64 = row.iter().map(|v| Float::exp(v - m)).sum();
        row.iter_mut().for_each(|v| *v = Float::exp(*v - m) / z);
    }
    cases.push(("kd_losses", Box::new(move |_| Ok(Subject::Distill { teacher_probs: probs.clone() })), alloc::vec![b, 2]));
    let target_mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let target_var: Vec<f64> = (0..c).map(|i| 0.5 + 0.1 * i as f64).collect();
    cases.push((
        "stat_matching",
        Box::new(move |_| {
            Ok(Subject::StatMatch {
                target_mean: target_mean.clone(),
                target_var: target_var.clone(),
            })
        }),
        alloc::vec![b, l, c],
    ));

    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, build, shape)) in cases.into_iter().enumerate() {
        let mut store64 = ParameterStore::<f64>::new(rng::derive(seed, i as u64));
        let subject = build(&mut store64)?;
        // Zero-initialized biases put ReLUs exactly on their kink; check at a
        // generic point instead.
        for e in store64.entries_mut().filter(|e| e.trainable) {
            let noise = rng::normal_tensor::<f64>(e.value.shape(), 0.0, 0.1, &mut rng);
            e.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
        let x64 = rng::normal_tensor::<f64>(&shape, 0.0, INPUT_STD, &mut rng);
        let mut case = Case { subject, projection: None };
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x64.clone())?;
        let probe = case.output(&mut tape, &mut store64.clone(), xv)?;
        let out_shape = tape.shape(probe).to_vec();
        case.projection = Some(rng::normal_tensor(&out_shape, 0.0, 1.0, &mut rng));

        let store: ParameterStore<T> = store64.cast();
        let report = check_gradients(&case, &store, &[x64.cast()], config)?;
        out.push(SuiteCase { name, report });
    }
    Ok(out)
}
