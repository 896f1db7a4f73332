//! Layer-level architecture description derived from configuration alone.
//!
//! This mirrors the constructors in `backbone`, `pruning` and `lite_ed` but
//! shares no code with them, so comparing its counts against a built model's
//! tensors checks both sides.

use serde::Serialize;

use crate::backbone::{Depth, ModuleKind, UNetConfig};
use crate::error::{Error, Result};
use crate::lite_ed::{LiteDecoderConfig, LiteEncoderConfig};
use crate::pipeline::ModelConfig;
use crate::pruning::{channel_prune, PruningPlan};

/// One primitive operation with everything needed to count it.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        /// Input spatial size.
        input: (usize, usize),
    },
    Linear {
        input: usize,
        output: usize,
        bias: bool,
        tokens: usize,
    },
    GroupNorm {
        channels: usize,
        positions: usize,
    },
    LayerNorm {
        channels: usize,
        positions: usize,
    },
    /// Score and mix products of softmax attention.
    Attention {
        queries: usize,
        keys: usize,
        dim: usize,
    },
    /// Key-value summary and query products of kernelized attention.
    LinearAttention {
        tokens: usize,
        dim: usize,
        heads: usize,
    },
    /// Statistics and affine map of cross normalization.
    CrossNorm {
        channels: usize,
        positions: usize,
    },
    /// Separable bicubic resize, applied as two dense matrix products.
    Resample {
        channels: usize,
        input: (usize, usize),
        output: (usize, usize),
    },
    /// A free-standing parameter tensor (embedding, gain, bias) with no products.
    Parameter { count: usize },
    /// A layer without a known cost formula.
    Opaque { name: String, params: usize },
}

pub(crate) fn conv_output(input: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * (kernel / 2) - kernel) / stride + 1
}

impl Op {
    pub fn params(&self) -> u64 {
        let n = match *self {
            Op::Conv {
                cin,
                cout,
                kernel,
                groups,
                bias,
                ..
            } => kernel * kernel * (cin / groups) * cout + if bias { cout } else { 0 },
            Op::Linear {
                input, output, bias, ..
            } => input * output + if bias { output } else { 0 },
            Op::GroupNorm { channels, .. } | Op::LayerNorm { channels, .. } => 2 * channels,
            Op::Attention { .. }
            | Op::LinearAttention { .. }
            | Op::CrossNorm { .. }
            | Op::Resample { .. } => 0,
            Op::Parameter { count } => count,
            Op::Opaque { params, .. } => params,
        };
        n as u64
    }

    /// Multiply-accumulates. Bias adds, activations and softmax are not counted.
    pub fn macs(&self) -> Result<u64> {
        let m = match *self {
            Op::Conv {
                cin,
                cout,
                kernel,
                stride,
                groups,
                input: (h, w),
                ..
            } => {
                let (oh, ow) = (conv_output(h, kernel, stride), conv_output(w, kernel, stride));
                (kernel * kernel * (cin / groups) * cout) as u64 * (oh * ow) as u64
            }
            Op::Linear {
                input, output, tokens, ..
            } => (tokens * input * output) as u64,
            Op::GroupNorm { channels, positions } | Op::LayerNorm { channels, positions } => {
                2 * (channels * positions) as u64
            }
            Op::Attention { queries, keys, dim } => 2 * (queries * keys) as u64 * dim as u64,
            Op::LinearAttention { tokens, dim, heads } => 2 * (tokens * dim) as u64 * (dim / heads) as u64,
            Op::CrossNorm { channels, positions } => 4 * (channels * positions) as u64,
            Op::Resample {
                channels,
                input: (ih, iw),
                output: (oh, ow),
            } => channels as u64 * ((oh * ih * iw) + (oh * iw * ow)) as u64,
            Op::Parameter { .. } => 0,
            Op::Opaque { ref name, .. } => {
                return Err(Error::UnsupportedLayer(name.clone()))
            }
        };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
}

/// A named submodule. `name` matches the parameter prefix of the built model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: String,
    pub depth: Option<Depth>,
    pub layers: Vec<LayerSpec>,
}

impl BlockSpec {
    fn new(name: impl Into<String>, kind: &str, depth: Option<Depth>) -> Self {
        Self {
            name: name.into(),
            kind: kind.into(),
            depth,
            layers: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op) -> &mut Self {
        self.layers.push(LayerSpec { name: name.into(), op });
        self
    }

    pub fn component(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }

    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.op.params()).sum()
    }

    pub fn macs(&self) -> Result<u64> {
        self.layers.iter().map(|l| l.op.macs()).sum()
    }
}

/// Full-model description at a given HR input size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Architecture {
    pub input_size: (usize, usize),
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    pub fn params(&self) -> u64 {
        self.blocks.iter().map(BlockSpec::params).sum()
    }

    pub fn component_params(&self, component: &str) -> u64 {
        self.blocks
            .iter()
            .filter(|b| b.component() == component)
            .map(BlockSpec::params)
            .sum()
    }

    pub fn component_macs(&self, component: &str) -> Result<u64> {
        self.blocks
            .iter()
            .filter(|b| b.component() == component)
            .map(BlockSpec::macs)
            .sum()
    }
}

fn conv(cin: usize, cout: usize, kernel: usize, input: (usize, usize)) -> Op {
    Op::Conv {
        cin,
        cout,
        kernel,
        stride: 1,
        groups: 1,
        bias: true,
        input,
    }
}

fn strided(op: Op, s: usize) -> Op {
    match op {
        Op::Conv {
            cin,
            cout,
            kernel,
            groups,
            bias,
            input,
            ..
        } => Op::Conv {
            cin,
            cout,
            kernel,
            stride: s,
            groups,
            bias,
            input,
        },
        other => other,
    }
}

fn linear(input: usize, output: usize, bias: bool, tokens: usize) -> Op {
    Op::Linear {
        input,
        output,
        bias,
        tokens,
    }
}

fn area((h, w): (usize, usize)) -> usize {
    h * w
}

fn half((h, w): (usize, usize)) -> (usize, usize) {
    (conv_output(h, 3, 2), conv_output(w, 3, 2))
}

/// Depthwise 3×3 (with bias) then pointwise 1×1 (with bias).
fn push_ds(b: &mut BlockSpec, prefix: &str, cin: usize, cout: usize, stride: usize, input: (usize, usize)) {
    b.push(
        format!("{prefix}.depthwise"),
        Op::Conv {
            cin,
            cout: cin,
            kernel: 3,
            stride,
            groups: cin,
            bias: true,
            input,
        },
    );
    let mid = if stride == 1 { input } else { half(input) };
    b.push(format!("{prefix}.pointwise"), conv(cin, cout, 1, mid));
}

struct UNetDescriber<'a> {
    cfg: &'a UNetConfig,
    plan: Option<&'a PruningPlan>,
    blocks: Vec<BlockSpec>,
}

impl UNetDescriber<'_> {
    fn pruned(&self, kind: ModuleKind, depth: Depth) -> bool {
        self.plan.is_some_and(|p| p.contains(kind, depth))
    }

    fn resblock(&mut self, name: String, depth: Depth, cin: usize, cout: usize, hw: (usize, usize)) {
        let temb = self.cfg.time_embed_dim();
        let ds = self.pruned(ModuleKind::Resblock, depth);
        let mut b = BlockSpec::new(name, if ds { "ds_resblock" } else { "resblock" }, Some(depth));
        b.push("norm1", Op::GroupNorm {
            channels: cin,
            positions: area(hw),
        });
        if ds {
            push_ds(&mut b, "conv1", cin, cout, 1, hw);
            b.push("time_bias", Op::Parameter { count: cout });
        } else {
            b.push("conv1", conv(cin, cout, 3, hw));
            b.push("time_proj", linear(temb, cout, true, 1));
        }
        b.push("norm2", Op::GroupNorm {
            channels: cout,
            positions: area(hw),
        });
        if ds {
            push_ds(&mut b, "conv2", cout, cout, 1, hw);
        } else {
            b.push("conv2", conv(cout, cout, 3, hw));
        }
        if cin != cout {
            b.push("skip", conv(cin, cout, 1, hw));
        }
        self.blocks.push(b);
    }

    fn downsample(&mut self, name: String, depth: Depth, c: usize, hw: (usize, usize)) {
        let mut b;
        if self.pruned(ModuleKind::Resblock, depth) {
            b = BlockSpec::new(name, "ds_downsample", Some(depth));
            push_ds(&mut b, "conv", c, c, 2, hw);
        } else {
            b = BlockSpec::new(name, "downsample", Some(depth));
            b.push("conv", strided(conv(c, c, 3, hw), 2));
        }
        self.blocks.push(b);
    }

    /// `hw` is the resolution after nearest-neighbour doubling.
    fn upsample(&mut self, name: String, depth: Depth, c: usize, hw: (usize, usize)) {
        let mut b;
        if self.pruned(ModuleKind::Resblock, depth) {
            b = BlockSpec::new(name, "ds_upsample", Some(depth));
            push_ds(&mut b, "conv", c, c, 1, hw);
        } else {
            b = BlockSpec::new(name, "upsample", Some(depth));
            b.push("conv", conv(c, c, 3, hw));
        }
        self.blocks.push(b);
    }

    fn transformer(&mut self, name: String, depth: Depth, c: usize, hw: (usize, usize)) {
        let l = area(hw);
        let heads = self.cfg.heads(c);
        let ctx = self.cfg.context_dim;

        let mut shell = BlockSpec::new(name.clone(), "transformer", Some(depth));
        shell
            .push("norm", Op::GroupNorm {
                channels: c,
                positions: l,
            })
            .push("proj_in", linear(c, c, true, l))
            .push("norm1", Op::LayerNorm {
                channels: c,
                positions: l,
            })
            .push("norm2", Op::LayerNorm {
                channels: c,
                positions: l,
            })
            .push("norm3", Op::LayerNorm {
                channels: c,
                positions: l,
            })
            .push("proj_out", linear(c, c, true, l));
        self.blocks.push(shell);

        let mut attn1;
        if self.pruned(ModuleKind::SelfAttention, depth) {
            attn1 = BlockSpec::new(format!("{name}.attn1"), "linear_attention", Some(depth));
            for p in ["to_q", "to_k", "to_v"] {
                attn1.push(p, linear(c, c, false, l));
            }
            attn1.push("kernel", Op::LinearAttention {
                tokens: l,
                dim: c,
                heads,
            });
            attn1.push("to_out", linear(c, c, false, l));
        } else {
            attn1 = BlockSpec::new(format!("{name}.attn1"), "self_attention", Some(depth));
            for p in ["to_q", "to_k", "to_v"] {
                attn1.push(p, linear(c, c, false, l));
            }
            attn1.push("scores", Op::Attention {
                queries: l,
                keys: l,
                dim: c,
            });
            attn1.push("to_out", linear(c, c, true, l));
        }
        self.blocks.push(attn1);

        let mut attn2;
        if self.pruned(ModuleKind::CrossAttention, depth) {
            let hidden = (c / 4).max(1);
            attn2 = BlockSpec::new(format!("{name}.attn2"), "cross_attn_mlp", Some(depth));
            attn2
                .push("fc1", linear(c, hidden, true, l))
                .push("fc2", linear(hidden, c, true, l));
        } else {
            // One learned context token.
            attn2 = BlockSpec::new(format!("{name}.attn2"), "cross_attention", Some(depth));
            attn2
                .push("to_q", linear(c, c, false, l))
                .push("to_k", linear(ctx, c, false, 1))
                .push("to_v", linear(ctx, c, false, 1))
                .push("scores", Op::Attention {
                    queries: l,
                    keys: 1,
                    dim: c,
                })
                .push("to_out", linear(c, c, true, l));
        }
        self.blocks.push(attn2);

        let full_hidden = self.cfg.ffn_mult * c;
        let (kind, hidden) = if self.pruned(ModuleKind::Ffn, depth) {
            ("ffn_slim", (full_hidden / 4).max(1))
        } else {
            ("ffn", full_hidden)
        };
        let width = if self.cfg.ffn_gated { 2 * hidden } else { hidden };
        let mut ff = BlockSpec::new(format!("{name}.ff"), kind, Some(depth));
        ff.push("proj_in", linear(c, width, true, l))
            .push("proj_out", linear(hidden, c, true, l));
        self.blocks.push(ff);
    }
}

/// The prunable family a block kind belongs to, if any.
pub fn module_kind(kind: &str) -> Option<ModuleKind> {
    match kind {
        "resblock" | "ds_resblock" | "downsample" | "ds_downsample" | "upsample" | "ds_upsample" => {
            Some(ModuleKind::Resblock)
        }
        "self_attention" | "linear_attention" => Some(ModuleKind::SelfAttention),
        "cross_attention" | "cross_attn_mlp" => Some(ModuleKind::CrossAttention),
        "ffn" | "ffn_slim" => Some(ModuleKind::Ffn),
        _ => None,
    }
}

fn depth_has_transformers(depth: Depth) -> bool {
    depth != Depth::IV
}

/// Blocks of the U-Net at latent resolution `latent`, with `plan`'s module
/// replacements (finalized form). Channel narrowing must already be applied
/// to `cfg`.
pub fn describe_unet(
    cfg: &UNetConfig,
    plan: Option<&PruningPlan>,
    latent: (usize, usize),
) -> Result<Vec<BlockSpec>> {
    cfg.validate()?;
    if latent.0 % 8 != 0 || latent.1 % 8 != 0 {
        return Err(Error::Shape(format!(
            "latent size {}x{} must be divisible by 8",
            latent.0, latent.1
        )));
    }
    let mut d = UNetDescriber {
        cfg,
        plan,
        blocks: Vec::new(),
    };
    let c0 = cfg.stem_channels();
    let temb = cfg.time_embed_dim();
    let mut te = BlockSpec::new("unet.time_embedding", "time_embedding", None);
    te.push("linear1", linear(c0, temb, true, 1))
        .push("linear2", linear(temb, temb, true, 1));
    d.blocks.push(te);
    let mut text = BlockSpec::new("unet.text_embedding", "embedding", None);
    text.push("", Op::Parameter { count: cfg.context_dim });
    d.blocks.push(text);

    let first = cfg.channels(Depth::I);
    let mut b = BlockSpec::new("unet.conv_in", "conv", Some(Depth::I));
    b.push("", conv(cfg.latent_channels, first, 3, latent));
    d.blocks.push(b);
    if cfg.injection_channels > 0 {
        let mut inj = BlockSpec::new("unet.injection", "injection", Some(Depth::I));
        inj.push("proj", conv(cfg.injection_channels, first, 1, latent))
            .push("alpha", Op::Parameter { count: 1 })
            .push("cross_norm", Op::CrossNorm {
                channels: first,
                positions: area(latent),
            });
        d.blocks.push(inj);
    }

    let mut skips = vec![first];
    let mut cur = first;
    let mut hw = latent;
    for (i, depth) in Depth::ALL.into_iter().enumerate() {
        let out = cfg.channels(depth);
        for j in 0..cfg.blocks_per_depth {
            d.resblock(format!("unet.down.{i}.resnets.{j}"), depth, cur, out, hw);
            cur = out;
            if depth_has_transformers(depth) {
                d.transformer(format!("unet.down.{i}.attentions.{j}"), depth, cur, hw);
            }
            skips.push(cur);
        }
        if depth != Depth::IV {
            d.downsample(format!("unet.down.{i}.downsample"), depth, cur, hw);
            hw = half(hw);
            skips.push(cur);
        }
    }

    d.resblock("unet.mid.resnets.0".into(), Depth::IV, cur, cur, hw);
    d.transformer("unet.mid.attentions.0".into(), Depth::IV, cur, hw);
    d.resblock("unet.mid.resnets.1".into(), Depth::IV, cur, cur, hw);

    for (u, depth) in Depth::ALL.into_iter().rev().enumerate() {
        let out = cfg.channels(depth);
        for j in 0..=cfg.blocks_per_depth {
            let skip = skips.pop().ok_or_else(|| Error::Config("skip stack exhausted".into()))?;
            d.resblock(format!("unet.up.{u}.resnets.{j}"), depth, cur + skip, out, hw);
            cur = out;
            if depth_has_transformers(depth) {
                d.transformer(format!("unet.up.{u}.attentions.{j}"), depth, cur, hw);
            }
        }
        if depth != Depth::I {
            hw = (hw.0 * 2, hw.1 * 2);
            d.upsample(format!("unet.up.{u}.upsample"), depth, cur, hw);
        }
    }

    let mut b = BlockSpec::new("unet.norm_out", "norm", Some(Depth::I));
    b.push("", Op::GroupNorm {
        channels: cur,
        positions: area(hw),
    });
    d.blocks.push(b);
    let mut b = BlockSpec::new("unet.conv_out", "conv", Some(Depth::I));
    b.push("", conv(cur, cfg.latent_channels, 3, hw));
    d.blocks.push(b);
    if let Some(p) = plan {
        for (kind, depth) in p.entries() {
            if !d.blocks.iter().any(|b| b.depth == Some(depth) && module_kind(&b.kind) == Some(kind)) {
                return Err(Error::PlanMismatch {
                    kind: kind.to_string(),
                    depth: depth.to_string(),
                });
            }
        }
    }
    Ok(d.blocks)
}

/// Encoder blocks for an HR-sized input (the bicubic-upsampled LR image).
pub fn describe_encoder(cfg: &LiteEncoderConfig, use_asc: bool, input: (usize, usize)) -> Result<Vec<BlockSpec>> {
    cfg.validate()?;
    let mut blocks = Vec::new();
    let s4 = (conv_output(input.0, 5, 4), conv_output(input.1, 5, 4));
    let s8 = half(s4);
    let mut push = |name: &str, op: Op| {
        let mut b = BlockSpec::new(format!("encoder.{name}"), "conv", None);
        b.push("", op);
        blocks.push(b);
    };
    push("conv1", strided(conv(3, cfg.stem_channels, 5, input), 4));
    push("conv2", strided(conv(cfg.stem_channels, cfg.dfi_channels, 3, s4), 2));
    push("conv3", conv(cfg.dfi_channels, cfg.hidden_channels, 3, s8));
    push("conv4", conv(cfg.hidden_channels, cfg.latent_channels, 3, s8));
    let mut asc = BlockSpec::new("encoder.asc", "asc_mlp", None);
    asc.push("fc1", linear(cfg.dfi_channels, cfg.asc_hidden, true, 1))
        .push("fc2", linear(cfg.asc_hidden, 4, true, 1));
    blocks.push(asc);
    if use_asc {
        let mut rs = BlockSpec::new("encoder.skip_sources", "resample", None);
        for i in 0..3 {
            let f = 1 << (3 - i);
            rs.push(format!("scale_{f}"), Op::Resample {
                channels: 3,
                input,
                output: (input.0 / f, input.1 / f),
            });
        }
        blocks.push(rs);
    }
    Ok(blocks)
}

/// Decoder blocks producing an `output`-sized image from an `output / 8` latent.
pub fn describe_decoder(cfg: &LiteDecoderConfig, use_asc: bool, output: (usize, usize)) -> Result<Vec<BlockSpec>> {
    cfg.validate()?;
    let c = cfg.channel_cap;
    let mut hw = (output.0 / 8, output.1 / 8);
    let mut blocks = Vec::new();
    let mut b = BlockSpec::new("decoder.conv_in", "conv", None);
    b.push("", conv(cfg.latent_channels, c, 3, hw));
    blocks.push(b);
    let conv_block = |b: &mut BlockSpec, prefix: String, hw| {
        for k in 1..=3 {
            b.push(format!("{prefix}conv{k}"), conv(c, c, 3, hw));
        }
    };
    for s in 0..cfg.upsample_stages {
        let mut b = BlockSpec::new(format!("decoder.stages.{s}"), "decoder_stage", None);
        for j in 0..cfg.blocks_per_stage {
            conv_block(&mut b, format!("blocks.{j}."), hw);
        }
        hw = (hw.0 * 2, hw.1 * 2);
        b.push("conv", Op::Conv {
            cin: c,
            cout: c,
            kernel: 3,
            stride: 1,
            groups: 1,
            bias: false,
            input: hw,
        });
        blocks.push(b);
    }
    for j in 0..cfg.head_resblocks {
        let mut b = BlockSpec::new(format!("decoder.head.{j}"), "conv_block", None);
        conv_block(&mut b, String::new(), hw);
        blocks.push(b);
    }
    let mut b = BlockSpec::new("decoder.conv_out", "conv", None);
    b.push("", conv(c, cfg.output_channels, 3, hw));
    blocks.push(b);
    for i in 0..4 {
        let f = 1 << (3 - i);
        let mut b = BlockSpec::new(format!("decoder.skip_convs.{i}"), "skip_conv", None);
        let op = conv(cfg.output_channels, c, 3, (output.0 / f, output.1 / f));
        b.push(
            "",
            if use_asc {
                op
            } else {
                Op::Parameter { count: op.params() as usize }
            },
        );
        blocks.push(b);
    }
    Ok(blocks)
}

/// Describe the whole model. With a plan, the U-Net is narrowed by the plan's
/// channel ratio and the selected modules are in their replaced form.
pub fn describe(model: &ModelConfig, plan: Option<&PruningPlan>, input: (usize, usize)) -> Result<Architecture> {
    model.validate()?;
    if input.0 % 8 != 0 || input.1 % 8 != 0 || input.0 == 0 || input.1 == 0 {
        return Err(Error::Shape(format!(
            "input size {}x{} must be a positive multiple of 8",
            input.0, input.1
        )));
    }
    let unet_cfg = match plan {
        Some(p) => {
            p.validate()?;
            channel_prune(&model.unet, p.channel_ratio)?
        }
        None => model.unet.clone(),
    };
    let latent = (input.0 / 8, input.1 / 8);
    let mut blocks = describe_encoder(&model.encoder, model.use_asc, input)?;
    blocks.extend(describe_unet(&unet_cfg, plan, latent)?);
    blocks.extend(describe_decoder(&model.decoder, model.use_asc, input)?);
    Ok(Architecture {
        input_size: input,
        blocks,
    })
}
