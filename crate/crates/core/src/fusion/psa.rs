use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Padding, Var};
use crate::nn::{Conv1d, Ctx, Dense};
use crate::params::ParameterStore;
use crate::scalar::Real;

/// Pyramid split attention.
///
/// Channels are split into `groups` chunks; chunk `g` goes through a 'same'
/// convolution with kernel `3 + 2g`. A shared squeeze-excitation module
/// (global average pool, bottleneck, sigmoid) scores every chunk, the scores
/// are softmax-normalized across chunks per channel, and each chunk is scaled
/// by its weight before the chunks are concatenated again.
#[derive(Debug, Clone)]
pub struct Psa {
    pub convs: Vec<Conv1d>,
    pub squeeze: Dense,
    pub excite: Dense,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PsaOutput {
    pub out: Var,
    /// Cross-group weights `[batch, groups, channels / groups]`.
    pub weights: Var,
}

impl Psa {
    pub fn kernel_size(group: usize) -> usize {
        3 + 2 * group
    }

    fn bottleneck(group_channels: usize) -> usize {
        (group_channels / 4).max(1)
    }

    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("psa: channels {channels} not divisible by groups {groups}")));
        }
        let cg = channels / groups;
        let convs = (0..groups)
            .map(|g| Conv1d::new(store, &format!("{name}/conv{g}"), cg, cg, Self::kernel_size(g), Padding::Same, 1))
            .collect::<Result<Vec<_>>>()?;
        let r = Self::bottleneck(cg);
        Ok(Psa {
            convs,
            squeeze: Dense::new(store, &format!("{name}/se/fc1"), cg, r, true)?,
            excite: Dense::new(store, &format!("{name}/se/fc2"), r, cg, true)?,
            channels,
            groups,
        })
    }

    pub fn param_count(channels: usize, groups: usize) -> usize {
        let cg = channels / groups;
        let r = Self::bottleneck(cg);
        let convs: usize = (0..groups).map(|g| Conv1d::param_count(cg, cg, Self::kernel_size(g))).sum();
        convs + Dense::param_count(cg, r, true) + Dense::param_count(r, cg, true)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<PsaOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape("psa", format!("expected [batch, len, {}], got {shape:?}", self.channels)));
        }
        let cg = self.channels / self.groups;
        let mut branches = Vec::with_capacity(self.groups);
        let mut scores = Vec::with_capacity(self.groups);
        for (g, conv) in self.convs.iter().enumerate() {
            let xg = ctx.tape.slice(x, 2, g * cg, cg)?;
            let yg = conv.forward(ctx, xg)?;
            let pooled = ctx.tape.mean_axes(yg, &[1])?;
            let s = self.squeeze.forward(ctx, pooled)?;
            let s = ctx.tape.relu(s)?;
            let s = self.excite.forward(ctx, s)?;
            scores.push(ctx.tape.sigmoid(s)?);
            branches.push(yg);
        }
        let stacked = ctx.tape.concat(&scores, 1)?;
        let weights = ctx.tape.softmax(stacked, 1)?;
        let mut outs = Vec::with_capacity(self.groups);
        for (g, &yg) in branches.iter().enumerate() {
            let wg = ctx.tape.slice(weights, 1, g, 1)?;
            outs.push(ctx.tape.mul(yg, wg)?);
        }
        let out = ctx.tape.concat(&outs, 2)?;
        Ok(PsaOutput { out, weights })
    }
}
