use alloc::format;

use num_traits::Float;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::Ctx;
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Real;

/// Learnable slot memory attended from every sequence position.
///
/// Each position is projected into the memory space, scored against every
/// slot by inner product, and the softmax-weighted mix of slots is projected
/// back and added to the input.
#[derive(Debug, Clone)]
pub struct ExternalMemory {
    pub memory: ParamId,
    pub proj_in: ParamId,
    pub proj_out: ParamId,
    pub channels: usize,
    pub slots: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryOutput {
    pub out: Var,
    /// Slot weights `[batch, len, slots]`.
    pub weights: Var,
    /// Per-position mixed memory `[batch, len, width]`.
    pub updated: Var,
}

impl ExternalMemory {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, slots: usize, width: usize) -> Result<Self> {
        if slots == 0 || width == 0 {
            return Err(crate::Error::Config(format!("{name}: memory needs slots and width > 0")));
        }
        let memory = store.add_normal(&format!("{name}/slots"), &[slots, width], 1.0 / Float::sqrt(width as f64))?;
        Ok(ExternalMemory {
            memory,
            proj_in: store.add_glorot_normal(&format!("{name}/proj_in"), &[channels, width], channels, width)?,
            proj_out: store.add_glorot_normal(&format!("{name}/proj_out"), &[width, channels], width, channels)?,
            channels,
            slots,
            width,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, y: Var) -> Result<MemoryOutput> {
        let shape = ctx.tape.shape(y).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape(
                "external_memory",
                format!("expected [batch, len, {}], got {shape:?}", self.channels),
            ));
        }
        let b = shape[0];
        let mem = ctx.param(self.memory)?;
        let w_in = ctx.param(self.proj_in)?;
        let w_out = ctx.param(self.proj_out)?;
        let tape = &mut *ctx.tape;

        let projected = tape.linear(y, w_in, None)?;
        let mem = tape.reshape(mem, &[1, self.slots, self.width])?;
        let mem = tape.broadcast_to(mem, &[b, self.slots, self.width])?;
        let scores = tape.bmm(projected, mem, true)?;
        let weights = tape.softmax(scores, 2)?;
        let updated = tape.bmm(weights, mem, false)?;
        let back = tape.linear(updated, w_out, None)?;
        let out = tape.add(y, back)?;
        Ok(MemoryOutput { out, weights, updated })
    }
}

