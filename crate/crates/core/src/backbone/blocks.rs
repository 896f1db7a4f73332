//! SD-layout U-Net building blocks.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::impl_params;
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Init, LayerNorm, Linear, Params};
use crate::pruning::Slot;
use crate::pruning::replacements::{CrossAttnFfn, DsDownsample, DsResBlock, DsUpsample, LinearAttention};

/// Per-forward conditioning shared by every block.
pub struct Cond<'a> {
    /// Time embedding, `[1, time_embed_dim]`.
    pub temb: &'a Tensor,
    /// Text context tokens, `[N, 1, context_dim]`.
    pub context: &'a Tensor,
}

/// A module with the uniform block signature used by annealed pairs.
pub trait Block: Params {
    fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl_params!(ResBlock { norm1, conv1, time_proj, norm2, conv2, skip });

impl ResBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        temb_dim: usize,
        groups: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let skip = if in_channels != out_channels {
            Some(Conv2d::new(ConvSpec::new(in_channels, out_channels, 1), init)?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(in_channels, groups, init)?,
            conv1: Conv2d::new(ConvSpec::new(in_channels, out_channels, 3), init)?,
            time_proj: Linear::new(temb_dim, out_channels, true, init)?,
            norm2: GroupNorm::new(out_channels, groups, init)?,
            conv2: Conv2d::new(ConvSpec::new(out_channels, out_channels, 3), init)?,
            skip,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    /// Per-channel time contribution, `[1, C_out]`.
    pub fn time_term(&self, temb: &Tensor) -> Result<Tensor> {
        self.time_proj.forward(&temb.silu()?)
    }
}

impl Block for ResBlock {
    fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_term(cond.temb)?;
        let h = h.broadcast_add(&t.reshape((t.dim(0)?, t.dim(1)?, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let residual = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((residual + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl_params!(Downsample { conv });

impl Downsample {
    pub fn new(channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(channels, channels, 3).stride(2), init)?,
        })
    }
}

impl Block for Downsample {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl_params!(Upsample { conv });

impl Upsample {
    pub fn new(channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(channels, channels, 3), init)?,
        })
    }
}

impl Block for Upsample {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.conv.forward(&nn::upsample2x(x)?)
    }
}

/// Multi-head scaled dot-product attention over token sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl_params!(Attention { to_q, to_k, to_v, to_out });

pub(crate) fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    Ok(x.reshape((n, l, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

pub(crate) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, l, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, l, h * d))?)
}

impl Attention {
    pub fn new(dim: usize, context_dim: usize, heads: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(dim, dim, false, init)?,
            to_k: Linear::new(context_dim, dim, false, init)?,
            to_v: Linear::new(context_dim, dim, false, init)?,
            to_out: Linear::new(dim, dim, true, init)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.to_q.out_features()
    }

    pub fn context_dim(&self) -> usize {
        self.to_k.in_features()
    }

    pub fn attend(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.to_q.forward(x)?, self.heads)?;
        let k = split_heads(&self.to_k.forward(context)?, self.heads)?;
        let v = split_heads(&self.to_v.forward(context)?, self.heads)?;
        let scale = 1.0 / ((q.dim(D::Minus1)?) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = merge_heads(&weights.matmul(&v)?)?;
        self.to_out.forward(&out)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention(pub Attention);

#[derive(Clone, Debug)]
pub struct CrossAttention(pub Attention);

macro_rules! transparent_params {
    ($ty:ty) => {
        impl Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                self.0.visit(prefix, f)
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                self.0.visit_mut(prefix, f)
            }
        }
    };
}

transparent_params!(SelfAttention);
transparent_params!(CrossAttention);

impl Block for SelfAttention {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        self.0.attend(x, x)
    }
}

impl Block for CrossAttention {
    fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        let n = x.dim(0)?;
        let ctx = if cond.context.dim(0)? == n {
            cond.context.clone()
        } else {
            let (_, l, c) = cond.context.dims3()?;
            cond.context.broadcast_as((n, l, c))?.contiguous()?
        };
        self.0.attend(x, &ctx)
    }
}

/// Transformer feed-forward: GEGLU (`gated`) or GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub proj_in: Linear,
    pub proj_out: Linear,
    pub gated: bool,
}

impl_params!(FeedForward { proj_in, proj_out });

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, gated: bool, init: &mut Init) -> Result<Self> {
        let width = if gated { 2 * hidden } else { hidden };
        Ok(Self {
            proj_in: Linear::new(dim, width, true, init)?,
            proj_out: Linear::new(hidden, dim, true, init)?,
            gated,
        })
    }

    pub fn hidden(&self) -> usize {
        self.proj_out.in_features()
    }

    pub fn dim(&self) -> usize {
        self.proj_in.in_features()
    }
}

impl Block for FeedForward {
    fn forward(&self, x: &Tensor, _cond: &Cond) -> Result<Tensor> {
        let h = self.proj_in.forward(x)?;
        let h = if self.gated {
            let hidden = self.hidden();
            let value = h.narrow(D::Minus1, 0, hidden)?;
            let gate = h.narrow(D::Minus1, hidden, hidden)?;
            (value * gate.gelu_erf()?)?
        } else {
            h.gelu_erf()?
        };
        self.proj_out.forward(&h)
    }
}

pub type ResSlot = Slot<ResBlock, DsResBlock>;
pub type DownSlot = Slot<Downsample, DsDownsample>;
pub type UpSlot = Slot<Upsample, DsUpsample>;
pub type SelfAttnSlot = Slot<SelfAttention, LinearAttention>;
pub type CrossAttnSlot = Slot<CrossAttention, CrossAttnFfn>;
pub type FfnSlot = Slot<FeedForward, FeedForward>;

/// Spatial transformer with one pre-norm transformer block (SD-2 linear projections).
#[derive(Clone)]
pub struct SpatialTransformer {
    pub norm: GroupNorm,
    pub proj_in: Linear,
    pub norm1: LayerNorm,
    pub attn1: SelfAttnSlot,
    pub norm2: LayerNorm,
    pub attn2: CrossAttnSlot,
    pub norm3: LayerNorm,
    pub ff: FfnSlot,
    pub proj_out: Linear,
}

impl_params!(SpatialTransformer { norm, proj_in, norm1, attn1, norm2, attn2, norm3, ff, proj_out });

impl SpatialTransformer {
    pub fn new(
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
        ffn_mult: usize,
        ffn_gated: bool,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(channels, groups, init)?,
            proj_in: Linear::new(channels, channels, true, init)?,
            norm1: LayerNorm::new(channels, init)?,
            attn1: Slot::Plain(SelfAttention(Attention::new(channels, channels, heads, init)?)),
            norm2: LayerNorm::new(channels, init)?,
            attn2: Slot::Plain(CrossAttention(Attention::new(channels, context_dim, heads, init)?)),
            norm3: LayerNorm::new(channels, init)?,
            ff: Slot::Plain(FeedForward::new(channels, ffn_mult * channels, ffn_gated, init)?),
            proj_out: Linear::new(channels, channels, true, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = nn::to_tokens(&self.norm.forward(x)?)?;
        let mut t = self.proj_in.forward(&tokens)?;
        t = (&t + self.attn1.forward(&self.norm1.forward(&t)?, cond)?)?;
        t = (&t + self.attn2.forward(&self.norm2.forward(&t)?, cond)?)?;
        t = (&t + self.ff.forward(&self.norm3.forward(&t)?, cond)?)?;
        let t = self.proj_out.forward(&t)?;
        Ok((nn::from_tokens(&t, h, w)? + x)?)
    }
}
