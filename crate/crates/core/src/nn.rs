//! Parameterized layers built on the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{NormStats, Padding, Tape, Var};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Input to a normalization layer, recorded during a forward pass when
/// [`Ctx::record_norm_inputs`] is enabled.
#[derive(Debug, Clone)]
pub struct NormTap {
    pub layer: String,
    pub input: Var,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Everything a layer needs for one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParameterStore<T>,
    pub mode: Mode,
    /// When false, parameters enter the tape as constants.
    pub trainable: bool,
    pub norm_taps: Option<Vec<NormTap>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParameterStore<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            trainable: mode == Mode::Train,
            norm_taps: None,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn record_norm_inputs(mut self) -> Self {
        self.norm_taps = Some(Vec::new());
        self
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id, self.trainable)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.add_he_normal(&format!("{name}/weight"), &[d_in, d_out], d_in)?;
        let bias = if bias {
            Some(store.add_param(&format!("{name}/bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Dense { weight, bias, d_in, d_out })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!("{name}: kernel and stride must be positive")));
        }
        let weight = store.add_he_normal(&format!("{name}/weight"), &[kernel, c_in, c_out], kernel * c_in)?;
        let bias = Some(store.add_param(&format!("{name}/bias"), Tensor::zeros(&[c_out]))?);
        Ok(Conv1d { weight, bias, kernel, c_in, c_out, padding, stride })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        kernel * c_in * c_out + c_out
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.conv1d(x, w, b, self.padding, self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl DepthwiseConv1d {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let weight = store.add_he_normal(&format!("{name}/weight"), &[kernel, channels], kernel)?;
        let bias = store.add_param(&format!("{name}/bias"), Tensor::zeros(&[channels]))?;
        Ok(DepthwiseConv1d { weight, bias, kernel, channels })
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        kernel * channels + channels
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.tape.depthwise_conv1d(x, w, Some(b))
    }
}

/// Batch normalization over every axis but the channel axis.
///
/// Running statistics follow `r <- (1 - momentum) * r + momentum * batch`,
/// with the unbiased batch variance feeding the running variance.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches_seen: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("{name}: batchnorm momentum must lie in [0, 1]")));
        }
        Ok(BatchNorm {
            name: name.into(),
            gamma: store.add_param(&format!("{name}/gamma"), Tensor::ones(&[channels]))?,
            beta: store.add_param(&format!("{name}/beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}/running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}/running_var"), Tensor::ones(&[channels]))?,
            batches_seen: store.add_buffer(&format!("{name}/batches_seen"), Tensor::zeros(&[1]))?,
            channels,
            momentum,
            eps: 1e-5,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if let Some(taps) = ctx.norm_taps.as_mut() {
            taps.push(NormTap {
                layer: self.name.clone(),
                input: x,
                running_mean: self.running_mean,
                running_var: self.running_var,
            });
        }
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        let eps = T::lit(self.eps);
        match ctx.mode {
            Mode::Train => {
                let shape = ctx.tape.shape(x);
                if shape[0] < 2 {
                    return Err(Error::Data(format!(
                        "{}: batch normalization in training mode needs a batch of at least 2, got {}",
                        self.name, shape[0]
                    )));
                }
                let rows = shape.iter().product::<usize>() / self.channels;
                let (y, mean, var) = ctx.tape.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
                let m = T::lit(self.momentum);
                let correction = T::lit(rows as f64 / (rows as f64 - 1.0));
                let keep = T::one() - m;
                for (r, &b) in ctx.store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in ctx.store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * b * correction;
                }
                ctx.store.value_mut(self.batches_seen).data_mut()[0] += T::one();
                Ok(y)
            }
            Mode::Infer => {
                let mean = ctx.store.value(self.running_mean).data().to_vec();
                let var = ctx.store.value(self.running_var).data().to_vec();
                let (y, _, _) = ctx.tape.batch_norm(x, gamma, beta, NormStats::Fixed { mean: &mean, var: &var }, eps)?;
                Ok(y)
            }
        }
    }

    pub fn running_stats<T: Real>(&self, store: &ParameterStore<T>) -> (Vec<T>, Vec<T>) {
        (
            store.value(self.running_mean).data().to_vec(),
            store.value(self.running_var).data().to_vec(),
        )
    }

    pub fn batches_seen<T: Real>(&self, store: &ParameterStore<T>) -> u64 {
        store.value(self.batches_seen).data()[0].as_f64() as u64
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: Dense::new(store, &format!("{name}/fc1"), d_in, d_hidden, true)?,
            out: Dense::new(store, &format!("{name}/fc2"), d_hidden, d_out, true)?,
        })
    }

    pub fn param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
        Dense::param_count(d_in, d_hidden, true) + Dense::param_count(d_hidden, d_out, true)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        self.out.forward(ctx, h)
    }
}
