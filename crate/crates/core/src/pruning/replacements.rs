//! Lightweight replacement modules and the replacement catalog.

use candle_core::{Device, Tensor};

use crate::backbone::blocks::{
    merge_heads, split_heads, Block, Cond, CrossAttention, Downsample, FeedForward, ResBlock,
    SelfAttention, Upsample,
};
use crate::backbone::config::ModuleKind;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Init, Linear, Params};

use super::linear_attention::linear_attention;

/// Depthwise k×k convolution followed by a 1×1 channel mix.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl_params!(DsConv { depthwise, pointwise });

impl DsConv {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(
                ConvSpec::new(in_channels, in_channels, kernel)
                    .stride(stride)
                    .groups(in_channels),
                init,
            )?,
            pointwise: Conv2d::new(ConvSpec::new(in_channels, out_channels, 1), init)?,
        })
    }

    /// Initialized from a dense convolution: the depthwise kernel is a centered
    /// delta and the pointwise weights are the dense kernel's center tap.
    pub fn from_conv(conv: &Conv2d, init: &mut Init) -> Result<Self> {
        let k = conv.kernel();
        let cin = conv.in_channels();
        let cout = conv.out_channels();
        let mut delta = vec![0f64; cin * k * k];
        for c in 0..cin {
            delta[c * k * k + (k / 2) * k + k / 2] = 1.0;
        }
        let depthwise = Conv2d {
            weight: init.trainable(delta, &[cin, 1, k, k])?,
            bias: Some(init.constant(&[cin], 0.0)?),
            stride: conv.stride,
            padding: conv.padding,
            groups: cin,
        };
        let center = conv
            .weight
            .narrow(2, k / 2, 1)?
            .narrow(3, k / 2, 1)?
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let bias = match &conv.bias {
            Some(b) => b.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; cout],
        };
        let pointwise = Conv2d {
            weight: init.trainable(center, &[cout, cin, 1, 1])?,
            bias: Some(init.trainable(bias, &[cout])?),
            stride: 1,
            padding: 0,
            groups: 1,
        };
        Ok(Self {
            depthwise,
            pointwise,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

/// Residual block with depthwise-separable convolutions. The time projection
/// collapses to a learned per-channel bias because the timestep is fixed.
#[derive(Clone, Debug)]
pub struct DsResBlock {
    pub norm1: GroupNorm,
    pub conv1: DsConv,
    pub time_bias: Tensor,
    pub norm2: GroupNorm,
    pub conv2: DsConv,
    pub skip: Option<Conv2d>,
}

impl_params!(DsResBlock { norm1, conv1, time_bias, norm2, conv2, skip });

impl DsResBlock {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, init: &mut Init) -> Result<Self> {
        let skip = if in_channels != out_channels {
            Some(Conv2d::new(ConvSpec::new(in_channels, out_channels, 1), init)?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(in_channels, groups, init)?,
            conv1: DsConv::new(in_channels, out_channels, 3, 1, init)?,
            time_bias: init.constant(&[out_channels], 0.0)?,
            norm2: GroupNorm::new(out_channels, groups, init)?,
            conv2: DsConv::new(out_channels, out_channels, 3, 1, init)?,
            skip,
        })
    }
}

impl Block for DsResBlock {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        let c = self.time_bias.dim(0)?;
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = h.broadcast_add(&self.time_bias.reshape((1, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let residual = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((residual + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct DsDownsample {
    pub conv: DsConv,
}

impl_params!(DsDownsample { conv });

impl Block for DsDownsample {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

#[derive(Clone, Debug)]
pub struct DsUpsample {
    pub conv: DsConv,
}

impl_params!(DsUpsample { conv });

impl Block for DsUpsample {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.conv.forward(&nn::upsample2x(x)?)
    }
}

/// Self-attention replacement using the positive-kernel linear attention.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl_params!(LinearAttention { to_q, to_k, to_v, to_out });

impl LinearAttention {
    pub fn new(dim: usize, heads: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(dim, dim, false, init)?,
            to_k: Linear::new(dim, dim, false, init)?,
            to_v: Linear::new(dim, dim, false, init)?,
            to_out: Linear::new(dim, dim, false, init)?,
            heads,
        })
    }
}

impl Block for LinearAttention {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        let q = split_heads(&self.to_q.forward(x)?, self.heads)?;
        let k = split_heads(&self.to_k.forward(x)?, self.heads)?;
        let v = split_heads(&self.to_v.forward(x)?, self.heads)?;
        let out = merge_heads(&linear_attention(&q, &k, &v)?)?;
        self.to_out.forward(&out)
    }
}

/// Context-free pointwise MLP standing in for cross-attention.
#[derive(Clone, Debug)]
pub struct CrossAttnFfn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_params!(CrossAttnFfn { fc1, fc2 });

impl CrossAttnFfn {
    pub fn new(dim: usize, init: &mut Init) -> Result<Self> {
        let hidden = (dim / 4).max(1);
        Ok(Self {
            fc1: Linear::new(dim, hidden, true, init)?,
            fc2: Linear::new(hidden, dim, true, init)?,
        })
    }
}

impl Block for CrossAttnFfn {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Hyperparameters of an original module, enough to build its replacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OriginalSpec {
    ResBlock {
        in_channels: usize,
        out_channels: usize,
        temb_dim: usize,
        groups: usize,
    },
    Downsample {
        channels: usize,
    },
    Upsample {
        channels: usize,
    },
    SelfAttention {
        dim: usize,
        heads: usize,
    },
    CrossAttention {
        dim: usize,
        context_dim: usize,
        heads: usize,
    },
    Ffn {
        dim: usize,
        hidden: usize,
        gated: bool,
    },
}

impl OriginalSpec {
    pub fn kind(&self) -> ModuleKind {
        match self {
            OriginalSpec::ResBlock { .. }
            | OriginalSpec::Downsample { .. }
            | OriginalSpec::Upsample { .. } => ModuleKind::Resblock,
            OriginalSpec::SelfAttention { .. } => ModuleKind::SelfAttention,
            OriginalSpec::CrossAttention { .. } => ModuleKind::CrossAttention,
            OriginalSpec::Ffn { .. } => ModuleKind::Ffn,
        }
    }

    /// Instantiate the original module itself (standard init).
    pub fn build_original(&self, init: &mut Init) -> Result<Original> {
        Ok(match *self {
            OriginalSpec::ResBlock {
                in_channels,
                out_channels,
                temb_dim,
                groups,
            } => Original::ResBlock(ResBlock::new(in_channels, out_channels, temb_dim, groups, init)?),
            OriginalSpec::Downsample { channels } => Original::Downsample(Downsample::new(channels, init)?),
            OriginalSpec::Upsample { channels } => Original::Upsample(Upsample::new(channels, init)?),
            OriginalSpec::SelfAttention { dim, heads } => Original::SelfAttention(SelfAttention(
                crate::backbone::blocks::Attention::new(dim, dim, heads, init)?,
            )),
            OriginalSpec::CrossAttention {
                dim,
                context_dim,
                heads,
            } => Original::CrossAttention(CrossAttention(crate::backbone::blocks::Attention::new(
                dim,
                context_dim,
                heads,
                init,
            )?)),
            OriginalSpec::Ffn { dim, hidden, gated } => {
                Original::Ffn(FeedForward::new(dim, hidden, gated, init)?)
            }
        })
    }
}

pub enum Original {
    ResBlock(ResBlock),
    Downsample(Downsample),
    Upsample(Upsample),
    SelfAttention(SelfAttention),
    CrossAttention(CrossAttention),
    Ffn(FeedForward),
}

pub enum Replacement {
    ResBlock(DsResBlock),
    Downsample(DsDownsample),
    Upsample(DsUpsample),
    SelfAttention(LinearAttention),
    CrossAttention(CrossAttnFfn),
    Ffn(FeedForward),
}

macro_rules! dispatch_params {
    ($ty:ident { $($variant:ident),* }) => {
        impl Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                match self { $( $ty::$variant(m) => m.visit(prefix, f), )* }
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                match self { $( $ty::$variant(m) => m.visit_mut(prefix, f), )* }
            }
        }
        impl Block for $ty {
            fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
                match self { $( $ty::$variant(m) => m.forward(x, cond), )* }
            }
        }
    };
}

dispatch_params!(Original { ResBlock, Downsample, Upsample, SelfAttention, CrossAttention, Ffn });
dispatch_params!(Replacement { ResBlock, Downsample, Upsample, SelfAttention, CrossAttention, Ffn });

/// Build the lightweight counterpart for a module of `kind` with the given
/// hyperparameters, using standard initialization.
pub fn make_replacement(kind: ModuleKind, spec: &OriginalSpec, init: &mut Init) -> Result<Replacement> {
    if spec.kind() != kind {
        return Err(Error::InvalidArgument(format!(
            "module kind {kind} does not match hyperparameters of a {}",
            spec.kind()
        )));
    }
    Ok(match *spec {
        OriginalSpec::ResBlock {
            in_channels,
            out_channels,
            groups,
            ..
        } => Replacement::ResBlock(DsResBlock::new(in_channels, out_channels, groups, init)?),
        OriginalSpec::Downsample { channels } => Replacement::Downsample(DsDownsample {
            conv: DsConv::new(channels, channels, 3, 2, init)?,
        }),
        OriginalSpec::Upsample { channels } => Replacement::Upsample(DsUpsample {
            conv: DsConv::new(channels, channels, 3, 1, init)?,
        }),
        OriginalSpec::SelfAttention { dim, heads } => {
            Replacement::SelfAttention(LinearAttention::new(dim, heads, init)?)
        }
        OriginalSpec::CrossAttention { dim, .. } => Replacement::CrossAttention(CrossAttnFfn::new(dim, init)?),
        OriginalSpec::Ffn { dim, hidden, gated } => {
            Replacement::Ffn(FeedForward::new(dim, (hidden / 4).max(1), gated, init)?)
        }
    })
}

/// Context needed when deriving a replacement from a live original.
pub struct ReplaceCtx<'a> {
    pub temb: &'a Tensor,
    pub groups: usize,
}

/// An original module that knows how to build its lightweight replacement.
pub trait Prunable: Block + Clone {
    type Replacement: Block + Clone;
    fn spec(&self, ctx: &ReplaceCtx) -> OriginalSpec;
    fn replacement(&self, ctx: &ReplaceCtx, init: &mut Init) -> Result<Self::Replacement>;
}

fn trainable_copy<P: Params + Clone>(m: &P) -> Result<P> {
    let mut out = m.clone();
    nn::make_trainable(&mut out)?;
    Ok(out)
}

fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t
        .to_device(&Device::Cpu)?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}

impl Prunable for ResBlock {
    type Replacement = DsResBlock;

    fn spec(&self, ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::ResBlock {
            in_channels: self.in_channels(),
            out_channels: self.out_channels(),
            temb_dim: self.time_proj.in_features(),
            groups: ctx.groups,
        }
    }

    fn replacement(&self, ctx: &ReplaceCtx, init: &mut Init) -> Result<DsResBlock> {
        let time = to_f64_vec(&self.time_term(ctx.temb)?)?;
        Ok(DsResBlock {
            norm1: trainable_copy(&self.norm1)?,
            conv1: DsConv::from_conv(&self.conv1, init)?,
            time_bias: init.trainable(time, &[self.out_channels()])?,
            norm2: trainable_copy(&self.norm2)?,
            conv2: DsConv::from_conv(&self.conv2, init)?,
            skip: match &self.skip {
                Some(s) => Some(trainable_copy(s)?),
                None => None,
            },
        })
    }
}

impl Prunable for Downsample {
    type Replacement = DsDownsample;

    fn spec(&self, _ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::Downsample {
            channels: self.conv.out_channels(),
        }
    }

    fn replacement(&self, _ctx: &ReplaceCtx, init: &mut Init) -> Result<DsDownsample> {
        Ok(DsDownsample {
            conv: DsConv::from_conv(&self.conv, init)?,
        })
    }
}

impl Prunable for Upsample {
    type Replacement = DsUpsample;

    fn spec(&self, _ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::Upsample {
            channels: self.conv.out_channels(),
        }
    }

    fn replacement(&self, _ctx: &ReplaceCtx, init: &mut Init) -> Result<DsUpsample> {
        Ok(DsUpsample {
            conv: DsConv::from_conv(&self.conv, init)?,
        })
    }
}

impl Prunable for SelfAttention {
    type Replacement = LinearAttention;

    fn spec(&self, _ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::SelfAttention {
            dim: self.0.dim(),
            heads: self.0.heads,
        }
    }

    fn replacement(&self, _ctx: &ReplaceCtx, init: &mut Init) -> Result<LinearAttention> {
        LinearAttention::new(self.0.dim(), self.0.heads, init)
    }
}

impl Prunable for CrossAttention {
    type Replacement = CrossAttnFfn;

    fn spec(&self, _ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::CrossAttention {
            dim: self.0.dim(),
            context_dim: self.0.context_dim(),
            heads: self.0.heads,
        }
    }

    fn replacement(&self, _ctx: &ReplaceCtx, init: &mut Init) -> Result<CrossAttnFfn> {
        CrossAttnFfn::new(self.0.dim(), init)
    }
}

impl Prunable for FeedForward {
    type Replacement = FeedForward;

    fn spec(&self, _ctx: &ReplaceCtx) -> OriginalSpec {
        OriginalSpec::Ffn {
            dim: self.dim(),
            hidden: self.hidden(),
            gated: self.gated,
        }
    }

    fn replacement(&self, _ctx: &ReplaceCtx, init: &mut Init) -> Result<FeedForward> {
        FeedForward::new(self.dim(), (self.hidden() / 4).max(1), self.gated, init)
    }
}
