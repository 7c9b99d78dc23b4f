//! Adaptive fusion attention block and the pyramid split attention block.
//!
//! The fusion block runs three branches over a `[batch, len, c]` sequence:
//! grouped multi-head query enhancement ([`Mdqe`]), a learnable external
//! memory attended per position ([`ExternalMemory`]), and a staged
//! convolution/attention pyramid ([`MultiStage`]) that halves the length at
//! every stage. [`fuse`] pools the first two branches down to the pyramid's
//! length and concatenates all three along channels.
//!
//! Parameters are registered as `<prefix>/fusion/<mechanism>/<tensor>`.

mod mdqe;
mod memory;
mod multistage;
mod psa;

use alloc::format;

pub use mdqe::{Mdqe, MdqeOutput};
pub use memory::{ExternalMemory, MemoryOutput};
pub use multistage::{MbConv, MultiStage, SingleHeadAttention, StageBlock};
pub use psa::{Psa, PsaOutput};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::Ctx;
use crate::params::ParameterStore;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub numhead: usize,
    /// Key/value head groups; heads in one group share pooled keys and values.
    pub groups: usize,
    pub memory_slots: usize,
    /// Width of the memory space; `None` uses the input channel count.
    pub memory_dim: Option<usize>,
    pub stages: usize,
    pub mb_expansion: usize,
    /// Hidden width of the stage MLPs as a multiple of the channel count.
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            numhead: 4,
            groups: 4,
            memory_slots: 64,
            memory_dim: None,
            stages: 2,
            mb_expansion: 4,
            mlp_ratio: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let err = |m: alloc::string::String| Err(Error::Config(m));
        if self.numhead == 0 || !channels.is_multiple_of(self.numhead) {
            return err(format!("channels {channels} not divisible by numhead {}", self.numhead));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return err(format!("channels {channels} not divisible by groups {}", self.groups));
        }
        if !self.numhead.is_multiple_of(self.groups) {
            return err(format!("numhead {} not divisible by groups {}", self.numhead, self.groups));
        }
        if self.memory_slots == 0 || self.memory_dim == Some(0) {
            return err("memory needs at least one slot and a positive width".into());
        }
        if self.stages == 0 || self.mb_expansion == 0 || self.mlp_ratio == 0 {
            return err("stages, mb_expansion and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self, channels: usize) -> usize {
        channels / self.numhead
    }

    pub fn memory_width(&self, channels: usize) -> usize {
        self.memory_dim.unwrap_or(channels)
    }

    /// Sequence length after the staged pyramid.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let factor = 1usize << self.stages;
        if !len.is_multiple_of(factor) {
            let padded = len.div_ceil(factor) * factor;
            return Err(Error::shape(
                "multistage_fusion",
                format!("length {len} is not divisible by 2^{} = {factor}; pad the sequence to {padded}", self.stages),
            ));
        }
        Ok(len / factor)
    }
}

/// Scaled dot-product attention over `[batch, len, d]` operands. Returns the
/// attended values and the row-stochastic weight matrix `[batch, len, len]`.
pub fn attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Pools `x_prime` and `y_prime` along the sequence down to the length of
/// `z_top`, then concatenates the three along channels.
pub fn fuse<T: Real>(tape: &mut Tape<T>, x_prime: Var, y_prime: Var, z_top: Var) -> Result<Var> {
    let target = tape.shape(z_top)[1];
    let mut aligned = [x_prime, y_prime];
    for v in aligned.iter_mut() {
        let len = tape.shape(*v)[1];
        if !len.is_multiple_of(target) {
            return Err(Error::shape("fuse", format!("branch length {len} cannot be pooled to {target}")));
        }
        let factor = len / target;
        if factor > 1 {
            *v = tape.maxpool1d(*v, factor, factor)?;
        }
    }
    tape.concat(&[aligned[0], aligned[1], z_top], 2)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub x_prime: Var,
    pub y_prime: Var,
    pub z_top: Var,
    pub fused: Var,
    pub query_weights: Var,
    pub memory_weights: Var,
}

/// The complete three-branch fusion block.
#[derive(Debug, Clone)]
pub struct AdaptiveFusion {
    pub config: FusionConfig,
    pub channels: usize,
    pub mdqe: Mdqe,
    pub memory: ExternalMemory,
    pub stages: MultiStage,
}

impl AdaptiveFusion {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, prefix: &str, channels: usize, config: FusionConfig) -> Result<Self> {
        config.validate(channels)?;
        Ok(AdaptiveFusion {
            config,
            channels,
            mdqe: Mdqe::new(store, &format!("{prefix}/mdqe"), channels, &config)?,
            memory: ExternalMemory::new(
                store,
                &format!("{prefix}/memory"),
                channels,
                config.memory_slots,
                config.memory_width(channels),
            )?,
            stages: MultiStage::new(store, &format!("{prefix}/multistage"), channels, &config)?,
        })
    }

    /// Closed-form trainable parameter count:
    ///
    /// * query enhancement: `4 c^2` (Q, K, V and output projections, no bias)
    /// * external memory: `s m + 2 c m` for `s` slots of width `m`
    /// * pyramid: stem conv `3 c^2 + c`; stage 1 MBConv
    ///   `(c e c + e c) + (3 e c + e c) + (e c c + c)`; every later stage a
    ///   single-head attention `3 c^2`; every stage an MLP
    ///   `(c h + h) + (h c + c)` with `h = mlp_ratio * c`.
    pub fn param_count(channels: usize, config: &FusionConfig) -> usize {
        let c = channels;
        let m = config.memory_width(c);
        let mdqe = 4 * c * c;
        let memory = config.memory_slots * m + 2 * c * m;
        let h = config.mlp_ratio * c;
        let e = config.mb_expansion * c;
        let stem = 3 * c * c + c;
        let mbconv = (c * e + e) + (3 * e + e) + (e * c + c);
        let attn = 3 * c * c;
        let mlp = (c * h + h) + (h * c + c);
        mdqe + memory + stem + mbconv + (config.stages - 1) * attn + config.stages * mlp
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<FusionOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape("fusion", format!("expected [batch, len, {}], got {shape:?}", self.channels)));
        }
        let q = self.mdqe.forward(ctx, x)?;
        let mem = self.memory.forward(ctx, q.out)?;
        let z_top = self.stages.forward(ctx, x)?;
        let fused = fuse(ctx.tape, q.out, mem.out, z_top)?;
        Ok(FusionOutput {
            x_prime: q.out,
            y_prime: mem.out,
            z_top,
            fused,
            query_weights: q.weights,
            memory_weights: mem.weights,
        })
    }
}
