use alloc::format;

use crate::error::{Error, Result};
use crate::fusion::{attention, FusionConfig};
use crate::graph::Var;
use crate::nn::Ctx;
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Real;

/// Multi-dimensional query enhancement.
///
/// Queries are split per head. Keys and values are split per head and then
/// averaged inside each head group, so every head of a group attends with the
/// same keys and values. With `groups == numhead` this is ordinary multi-head
/// attention; with `groups == 1` all heads share one key/value set.
#[derive(Debug, Clone)]
pub struct Mdqe {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MdqeOutput {
    pub out: Var,
    /// Attention weights `[batch * heads, len, len]`.
    pub weights: Var,
}

impl Mdqe {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, config: &FusionConfig) -> Result<Self> {
        config.validate(channels)?;
        let c = channels;
        Ok(Mdqe {
            wq: store.add_glorot_normal(&format!("{name}/wq"), &[c, c], c, c)?,
            wk: store.add_glorot_normal(&format!("{name}/wk"), &[c, c], c, c)?,
            wv: store.add_glorot_normal(&format!("{name}/wv"), &[c, c], c, c)?,
            wo: store.add_glorot_normal(&format!("{name}/wo"), &[c, c], c, c)?,
            channels,
            heads: config.numhead,
            groups: config.groups,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<MdqeOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape("mdqe", format!("expected [batch, len, {}], got {shape:?}", self.channels)));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, c / self.heads);
        let per_group = h / self.groups;

        let wq = ctx.param(self.wq)?;
        let wk = ctx.param(self.wk)?;
        let wv = ctx.param(self.wv)?;
        let wo = ctx.param(self.wo)?;

        let tape = &mut *ctx.tape;
        let q = tape.linear(x, wq, None)?;
        let k = tape.linear(x, wk, None)?;
        let v = tape.linear(x, wv, None)?;

        let mut split = |t: Var, pooled: bool| -> Result<Var> {
            let t = if pooled && per_group > 1 {
                let t = tape.reshape(t, &[b, l, self.groups, per_group, d])?;
                let t = tape.mean_axes(t, &[3])?;
                tape.broadcast_to(t, &[b, l, self.groups, per_group, d])?
            } else {
                t
            };
            let t = tape.reshape(t, &[b, l, h, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            tape.reshape(t, &[b * h, l, d])
        };
        let q = split(q, false)?;
        let k = split(k, true)?;
        let v = split(v, true)?;

        let (z, weights) = attention(tape, q, k, v)?;
        let z = tape.reshape(z, &[b, h, l, d])?;
        let z = tape.permute(z, &[0, 2, 1, 3])?;
        let z = tape.reshape(z, &[b, l, c])?;
        let out = tape.linear(z, wo, None)?;
        Ok(MdqeOutput { out, weights })
    }
}
