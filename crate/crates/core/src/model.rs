//! Teacher and student classifiers.
//!
//! Teacher: adaptive fusion block, then three `conv(k=3) -> batchnorm -> relu
//! -> maxpool(2, 2)` blocks (64, 128, 256 filters), a global max over the
//! sequence and a dense head over two classes.
//!
//! Student: `conv(64) -> relu -> maxpool -> PSA -> conv(128) -> relu ->
//! maxpool`, global max, then `dense -> batchnorm -> relu -> dense`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{AdaptiveFusion, FusionConfig, Psa};
use crate::graph::{Padding, Tape, Var};
use crate::nn::{BatchNorm, Conv1d, Ctx, Dense, Mode, NormTap};
use crate::params::ParameterStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub trainable: bool,
    pub record_norm_inputs: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            trainable: true,
            record_norm_inputs: false,
        }
    }

    pub fn infer() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            trainable: false,
            record_norm_inputs: false,
        }
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    /// `[batch, classes]`
    pub logits: Var,
    /// Distillation tap, when the model has one.
    pub tap: Option<Var>,
    pub norm_taps: Vec<NormTap>,
}

/// A network mapping `[batch, seq_len, channels]` inputs to class logits.
pub trait Classifier<T: Real> {
    fn input_shape(&self) -> (usize, usize);
    fn store(&self) -> &ParameterStore<T>;
    fn store_mut(&mut self) -> &mut ParameterStore<T>;
    fn forward(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<Pass>;

    fn count_params(&self) -> usize {
        self.store().count_params()
    }

    /// Class probabilities in inference mode.
    fn predict_proba(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        let pass = self.forward(&mut tape, x, ForwardOptions::infer())?;
        let p = tape.softmax(pass.logits, 1)?;
        Ok(tape.value(p).clone())
    }
}

fn check_input<T: Real>(tape: &Tape<T>, x: Var, seq_len: usize, channels: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != seq_len || s[2] != channels {
        return Err(Error::shape(
            "model input",
            format!("expected [batch, {seq_len}, {channels}], got {s:?}"),
        ));
    }
    Ok(())
}

fn global_max<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let pooled = tape.maxpool1d(x, s[1], s[1])?;
    tape.reshape(pooled, &[s[0], s[2]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    /// Model input length `N * K`.
    pub seq_len: usize,
    pub channels: usize,
    /// `None` builds the conv stack directly on the input.
    pub fusion: Option<FusionConfig>,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub bn_momentum: f64,
    /// Conv block whose pooled output is the distillation tap.
    pub tap_block: Option<usize>,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn new(seq_len: usize, channels: usize) -> Self {
        TeacherSpec {
            seq_len,
            channels,
            fusion: Some(FusionConfig::default()),
            conv_filters: vec![64, 128, 256],
            kernel: 3,
            classes: 2,
            bn_momentum: 0.1,
            tap_block: None,
            seed: 0,
        }
    }

    pub fn tap(&self) -> usize {
        self.tap_block.unwrap_or(self.conv_filters.len().saturating_sub(1))
    }

    fn fusion_len(&self) -> Result<usize> {
        match &self.fusion {
            Some(f) => f.output_len(self.seq_len),
            None => Ok(self.seq_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.classes < 2 || self.kernel == 0 {
            return Err(Error::Config("teacher needs conv filters, a kernel and at least two classes".into()));
        }
        if self.tap() >= self.conv_filters.len() {
            return Err(Error::Config(format!("tap block {} does not exist", self.tap())));
        }
        if let Some(f) = &self.fusion {
            f.validate(self.channels)?;
        }
        let len = self.fusion_len()?;
        let factor = 1usize << self.conv_filters.len();
        if len % factor != 0 {
            return Err(Error::shape(
                "teacher",
                format!(
                    "length {len} after fusion cannot pass {} pooling layers; input length must be a multiple of {}",
                    self.conv_filters.len(),
                    factor * (self.seq_len / len)
                ),
            ));
        }
        Ok(())
    }

    /// Per-sample output shape of every layer, from the closed-form length
    /// rules (same-padded convs keep length, each pool halves it).
    pub fn shape_table(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut rows = vec![(String::from("input"), vec![self.seq_len, self.channels])];
        let mut len = self.seq_len;
        let mut ch = self.channels;
        if let Some(f) = &self.fusion {
            len = f.output_len(len)?;
            ch *= 3;
            rows.push((String::from("fusion"), vec![len, ch]));
        }
        for (i, &filters) in self.conv_filters.iter().enumerate() {
            rows.push((format!("block{}/conv", i + 1), vec![len, filters]));
            len /= 2;
            rows.push((format!("block{}/pool", i + 1), vec![len, filters]));
            ch = filters;
        }
        rows.push((String::from("global_max"), vec![ch]));
        rows.push((String::from("head"), vec![self.classes]));
        Ok(rows)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.channels;
        if let Some(f) = &self.fusion {
            total += AdaptiveFusion::param_count(self.channels, f);
            c_in = 3 * self.channels;
        }
        for &filters in &self.conv_filters {
            total += Conv1d::param_count(c_in, filters, self.kernel) + BatchNorm::param_count(filters);
            c_in = filters;
        }
        total + Dense::param_count(c_in, self.classes, true)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct TeacherModel<T> {
    pub spec: TeacherSpec,
    pub store: ParameterStore<T>,
    pub fusion: Option<AdaptiveFusion>,
    pub blocks: Vec<ConvBlock>,
    pub head: Dense,
}

pub fn build_teacher<T: Real>(spec: &TeacherSpec) -> Result<TeacherModel<T>> {
    spec.validate()?;
    let mut store = ParameterStore::new(spec.seed);
    let fusion = match &spec.fusion {
        Some(cfg) => Some(AdaptiveFusion::new(&mut store, "teacher/fusion", spec.channels, *cfg)?),
        None => None,
    };
    let mut c_in = if fusion.is_some() { 3 * spec.channels } else { spec.channels };
    let mut blocks = Vec::new();
    for (i, &filters) in spec.conv_filters.iter().enumerate() {
        let name = format!("teacher/block{}", i + 1);
        blocks.push(ConvBlock {
            conv: Conv1d::new(&mut store, &format!("{name}/conv"), c_in, filters, spec.kernel, Padding::Same, 1)?,
            norm: BatchNorm::new(&mut store, &format!("{name}/bn"), filters, spec.bn_momentum)?,
        });
        c_in = filters;
    }
    let head = Dense::new(&mut store, "teacher/head", c_in, spec.classes, true)?;
    Ok(TeacherModel {
        spec: spec.clone(),
        store,
        fusion,
        blocks,
        head,
    })
}

impl<T: Real> TeacherModel<T> {
    /// Normalization layers up to and including the tap block.
    pub fn tapped_norms(&self) -> &[ConvBlock] {
        &self.blocks[..=self.spec.tap()]
    }

    /// Forward pass that also returns the output of every layer listed in
    /// [`TeacherSpec::shape_table`].
    pub fn forward_traced(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<(Pass, Vec<Var>)> {
        check_input(tape, x, self.spec.seq_len, self.spec.channels)?;
        let mut ctx = Ctx::new(tape, &mut self.store, opts.mode);
        ctx.trainable = opts.trainable;
        if opts.record_norm_inputs {
            ctx = ctx.record_norm_inputs();
        }
        let mut trace = vec![x];
        let mut h = x;
        if let Some(f) = &self.fusion {
            h = f.forward(&mut ctx, h)?.fused;
            trace.push(h);
        }
        let mut tap = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let c = block.conv.forward(&mut ctx, h)?;
            trace.push(c);
            let n = block.norm.forward(&mut ctx, c)?;
            let r = ctx.tape.relu(n)?;
            h = ctx.tape.maxpool1d(r, 2, 2)?;
            trace.push(h);
            if i == self.spec.tap() {
                tap = Some(h);
            }
        }
        let g = global_max(ctx.tape, h)?;
        trace.push(g);
        let logits = self.head.forward(&mut ctx, g)?;
        trace.push(logits);
        let norm_taps = ctx.norm_taps.take().unwrap_or_default();
        Ok((Pass { logits, tap, norm_taps }, trace))
    }
}

impl<T: Real> Classifier<T> for TeacherModel<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.spec.seq_len, self.spec.channels)
    }

    fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<Pass> {
        self.forward_traced(tape, x, opts).map(|(p, _)| p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec {
    pub seq_len: usize,
    pub channels: usize,
    pub conv_filters: [usize; 2],
    pub kernel: usize,
    pub psa_groups: usize,
    pub hidden: usize,
    pub classes: usize,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl StudentSpec {
    pub fn new(seq_len: usize, channels: usize) -> Self {
        StudentSpec {
            seq_len,
            channels,
            conv_filters: [64, 128],
            kernel: 3,
            psa_groups: 4,
            hidden: 64,
            classes: 2,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.seq_len.is_multiple_of(4) {
            return Err(Error::shape(
                "student",
                format!("input length {} must be a multiple of 4 for two pooling layers", self.seq_len),
            ));
        }
        if self.psa_groups == 0 || !self.conv_filters[0].is_multiple_of(self.psa_groups) {
            return Err(Error::Config(format!(
                "student: {} filters not divisible into {} PSA groups",
                self.conv_filters[0], self.psa_groups
            )));
        }
        if self.classes < 2 || self.hidden == 0 || self.kernel == 0 {
            return Err(Error::Config("student needs a kernel, hidden units and two classes".into()));
        }
        Ok(())
    }

    pub fn shape_table(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let [f1, f2] = self.conv_filters;
        let l = self.seq_len;
        Ok(vec![
            (String::from("input"), vec![l, self.channels]),
            (String::from("conv1"), vec![l, f1]),
            (String::from("pool1"), vec![l / 2, f1]),
            (String::from("psa"), vec![l / 2, f1]),
            (String::from("conv2"), vec![l / 2, f2]),
            (String::from("pool2"), vec![l / 4, f2]),
            (String::from("global_max"), vec![f2]),
            (String::from("fc1"), vec![self.hidden]),
            (String::from("fc2"), vec![self.classes]),
        ])
    }

    pub fn param_count(&self) -> usize {
        let [f1, f2] = self.conv_filters;
        Conv1d::param_count(self.channels, f1, self.kernel)
            + Psa::param_count(f1, self.psa_groups)
            + Conv1d::param_count(f1, f2, self.kernel)
            + Dense::param_count(f2, self.hidden, true)
            + BatchNorm::param_count(self.hidden)
            + Dense::param_count(self.hidden, self.classes, true)
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel<T> {
    pub spec: StudentSpec,
    pub store: ParameterStore<T>,
    pub conv1: Conv1d,
    pub psa: Psa,
    pub conv2: Conv1d,
    pub fc1: Dense,
    pub norm: BatchNorm,
    pub fc2: Dense,
}

pub fn build_student<T: Real>(spec: &StudentSpec) -> Result<StudentModel<T>> {
    spec.validate()?;
    let mut store = ParameterStore::new(spec.seed);
    let [f1, f2] = spec.conv_filters;
    let conv1 = Conv1d::new(&mut store, "student/conv1", spec.channels, f1, spec.kernel, Padding::Same, 1)?;
    let psa = Psa::new(&mut store, "student/psa", f1, spec.psa_groups)?;
    let conv2 = Conv1d::new(&mut store, "student/conv2", f1, f2, spec.kernel, Padding::Same, 1)?;
    let fc1 = Dense::new(&mut store, "student/fc1", f2, spec.hidden, true)?;
    let norm = BatchNorm::new(&mut store, "student/bn", spec.hidden, spec.bn_momentum)?;
    let fc2 = Dense::new(&mut store, "student/fc2", spec.hidden, spec.classes, true)?;
    Ok(StudentModel {
        spec: spec.clone(),
        store,
        conv1,
        psa,
        conv2,
        fc1,
        norm,
        fc2,
    })
}

impl<T: Real> StudentModel<T> {
    pub fn forward_traced(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<(Pass, Vec<Var>)> {
        check_input(tape, x, self.spec.seq_len, self.spec.channels)?;
        let mut ctx = Ctx::new(tape, &mut self.store, opts.mode);
        ctx.trainable = opts.trainable;
        if opts.record_norm_inputs {
            ctx = ctx.record_norm_inputs();
        }
        let mut trace = vec![x];
        let c1 = self.conv1.forward(&mut ctx, x)?;
        trace.push(c1);
        let r1 = ctx.tape.relu(c1)?;
        let p1 = ctx.tape.maxpool1d(r1, 2, 2)?;
        trace.push(p1);
        let a = self.psa.forward(&mut ctx, p1)?.out;
        trace.push(a);
        let c2 = self.conv2.forward(&mut ctx, a)?;
        trace.push(c2);
        let r2 = ctx.tape.relu(c2)?;
        let p2 = ctx.tape.maxpool1d(r2, 2, 2)?;
        trace.push(p2);
        let g = global_max(ctx.tape, p2)?;
        trace.push(g);
        let h = self.fc1.forward(&mut ctx, g)?;
        trace.push(h);
        let h = self.norm.forward(&mut ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let logits = self.fc2.forward(&mut ctx, h)?;
        trace.push(logits);
        let norm_taps = ctx.norm_taps.take().unwrap_or_default();
        Ok((
            Pass {
                logits,
                tap: None,
                norm_taps,
            },
            trace,
        ))
    }
}

impl<T: Real> Classifier<T> for StudentModel<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.spec.seq_len, self.spec.channels)
    }

    fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<Pass> {
        self.forward_traced(tape, x, opts).map(|(p, _)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_teacher() -> TeacherSpec {
        let mut s = TeacherSpec::new(32, 8);
        s.conv_filters = vec![4, 8, 16];
        s.fusion = Some(FusionConfig {
            numhead: 2,
            groups: 2,
            memory_slots: 4,
            ..FusionConfig::default()
        });
        s
    }

    #[test]
    fn teacher_zero_input_gives_probability_rows() {
        let mut t = build_teacher::<f64>(&small_teacher()).unwrap();
        let p = t.predict_proba(&Tensor::zeros(&[3, 32, 8])).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_shapes_follow_the_closed_form_table() {
        let spec = small_teacher();
        let table = spec.shape_table().unwrap();
        let mut t = build_teacher::<f64>(&spec).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 32, 8])).unwrap();
        let (_, trace) = t.forward_traced(&mut tape, x, ForwardOptions::infer()).unwrap();
        assert_eq!(trace.len(), table.len());
        for ((name, shape), v) in table.iter().zip(&trace) {
            assert_eq!(&tape.shape(*v)[1..], shape.as_slice(), "{name}");
        }

        let sspec = StudentSpec::new(32, 8);
        let table = sspec.shape_table().unwrap();
        let mut s = build_student::<f64>(&sspec).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 32, 8])).unwrap();
        let (_, trace) = s.forward_traced(&mut tape, x, ForwardOptions::infer()).unwrap();
        for ((name, shape), v) in table.iter().zip(&trace) {
            assert_eq!(&tape.shape(*v)[1..], shape.as_slice(), "{name}");
        }
    }

    #[test]
    fn closed_form_counts_match_built_models() {
        for spec in [small_teacher(), TeacherSpec::new(64, 16)] {
            let t = build_teacher::<f32>(&spec).unwrap();
            assert_eq!(t.count_params(), spec.param_count());
        }
        let sspec = StudentSpec::new(64, 16);
        assert_eq!(build_student::<f32>(&sspec).unwrap().count_params(), sspec.param_count());
    }

    #[test]
    fn infeasible_lengths_fail_at_build_time() {
        let mut spec = small_teacher();
        spec.seq_len = 36;
        assert!(build_teacher::<f32>(&spec).is_err());
        assert!(build_student::<f32>(&StudentSpec::new(30, 8)).is_err());
    }

    #[test]
    fn student_is_smaller_than_teacher_by_default() {
        let t = TeacherSpec::new(512, 300);
        let s = StudentSpec::new(512, 300);
        assert!(s.param_count() < t.param_count());
    }
}
