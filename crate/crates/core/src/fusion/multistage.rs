use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{attention, FusionConfig};
use crate::graph::{Padding, Var};
use crate::nn::{Conv1d, Ctx, Dense, DepthwiseConv1d, Mlp};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Real;

/// Inverted bottleneck: pointwise expand, depthwise kernel-3 conv, pointwise
/// project, plus the identity shortcut.
#[derive(Debug, Clone)]
pub struct MbConv {
    pub expand: Dense,
    pub depthwise: DepthwiseConv1d,
    pub project: Dense,
}

impl MbConv {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, expansion: usize) -> Result<Self> {
        let wide = channels * expansion;
        Ok(MbConv {
            expand: Dense::new(store, &format!("{name}/expand"), channels, wide, true)?,
            depthwise: DepthwiseConv1d::new(store, &format!("{name}/depthwise"), wide, 3)?,
            project: Dense::new(store, &format!("{name}/project"), wide, channels, true)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        let h = self.depthwise.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.project.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// Single-head scaled dot-product self-attention with bias-free projections.
#[derive(Debug, Clone)]
pub struct SingleHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl SingleHeadAttention {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(SingleHeadAttention {
            wq: store.add_glorot_normal(&format!("{name}/wq"), &[c, c], c, c)?,
            wk: store.add_glorot_normal(&format!("{name}/wk"), &[c, c], c, c)?,
            wv: store.add_glorot_normal(&format!("{name}/wv"), &[c, c], c, c)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let wq = ctx.param(self.wq)?;
        let wk = ctx.param(self.wk)?;
        let wv = ctx.param(self.wv)?;
        let q = ctx.tape.linear(x, wq, None)?;
        let k = ctx.tape.linear(x, wk, None)?;
        let v = ctx.tape.linear(x, wv, None)?;
        attention(ctx.tape, q, k, v)
    }
}

#[derive(Debug, Clone)]
pub enum StageBlock {
    MbConv(MbConv),
    Attention(SingleHeadAttention),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub block: StageBlock,
    pub mlp: Mlp,
}

/// Convolutional stem followed by `stages` blocks, each
/// `maxpool(2, 2)(mlp(block(z)))`. The first block is an MBConv, the rest are
/// single-head attention.
#[derive(Debug, Clone)]
pub struct MultiStage {
    pub stem: Conv1d,
    pub stages: Vec<Stage>,
    config: FusionConfig,
}

impl MultiStage {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, channels: usize, config: &FusionConfig) -> Result<Self> {
        config.validate(channels)?;
        let stem = Conv1d::new(store, &format!("{name}/stem"), channels, channels, 3, Padding::Same, 1)?;
        let mut stages = Vec::with_capacity(config.stages);
        for i in 0..config.stages {
            let prefix = format!("{name}/stage{}", i + 1);
            let block = if i == 0 {
                StageBlock::MbConv(MbConv::new(store, &format!("{prefix}/mbconv"), channels, config.mb_expansion)?)
            } else {
                StageBlock::Attention(SingleHeadAttention::new(store, &format!("{prefix}/attention"), channels)?)
            };
            let mlp = Mlp::new(store, &format!("{prefix}/mlp"), channels, config.mlp_ratio * channels, channels)?;
            stages.push(Stage { block, mlp });
        }
        Ok(MultiStage { stem, stages, config: *config })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(ctx, x).map(|(z, _)| z)
    }

    /// Like [`MultiStage::forward`], also returning the attention weights of
    /// every attention stage.
    pub fn forward_with_weights<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("multistage_fusion", format!("expected [batch, len, c], got {shape:?}")));
        }
        self.config.output_len(shape[1])?;
        let mut z = self.stem.forward(ctx, x)?;
        let mut weights = Vec::new();
        for stage in &self.stages {
            z = match &stage.block {
                StageBlock::MbConv(m) => m.forward(ctx, z)?,
                StageBlock::Attention(a) => {
                    let (out, w) = a.forward(ctx, z)?;
                    weights.push(w);
                    out
                }
            };
            z = stage.mlp.forward(ctx, z)?;
            z = ctx.tape.maxpool1d(z, 2, 2)?;
        }
        Ok((z, weights))
    }
}
