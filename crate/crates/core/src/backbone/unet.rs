use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use super::blocks::{Block, Cond, Downsample, DownSlot, ResBlock, ResSlot, SpatialTransformer, UpSlot, Upsample};
use super::config::{Depth, DepthEntry, DepthMap, ModuleKind, Position, UNetConfig, FIXED_TIMESTEP};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::lite_ed::cross_norm::Injection;
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Init, Linear};
use crate::pruning::{AnnealingSchedule, Slot, SlotControl};

/// Names of the stage outputs exposed for feature distillation.
pub const STAGE_NAMES: [&str; 10] = [
    "down.0", "down.1", "down.2", "down.3", "mid", "up.0", "up.1", "up.2", "up.3", "out",
];

#[derive(Clone)]
pub struct DownStage {
    pub resnets: Vec<ResSlot>,
    pub attentions: Vec<SpatialTransformer>,
    pub downsample: Option<DownSlot>,
}

impl_params!(DownStage { resnets, attentions, downsample });

#[derive(Clone)]
pub struct MidStage {
    pub resnets: Vec<ResSlot>,
    pub attentions: Vec<SpatialTransformer>,
}

impl_params!(MidStage { resnets, attentions });

#[derive(Clone)]
pub struct UpStage {
    pub resnets: Vec<ResSlot>,
    pub attentions: Vec<SpatialTransformer>,
    pub upsample: Option<UpSlot>,
}

impl_params!(UpStage { resnets, attentions, upsample });

/// Two-layer MLP over the sinusoidal timestep embedding. Frozen: the
/// timestep never changes, so neither does its embedding.
#[derive(Clone)]
pub struct TimeEmbedding {
    pub linear1: Linear,
    pub linear2: Linear,
}

impl_params!(TimeEmbedding { linear1, linear2 });

/// Sinusoidal embedding with cosine first (SD convention), `[1, dim]`.
pub fn sinusoidal_embedding(timestep: u32, dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    values.extend(freqs.iter().map(|f| (timestep as f64 * f).cos()));
    values.extend(freqs.iter().map(|f| (timestep as f64 * f).sin()));
    values.resize(dim, 0.0);
    Ok(Tensor::from_vec(values, (1, dim), device)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub time_embedding: TimeEmbedding,
    pub text_embedding: Tensor,
    pub conv_in: Conv2d,
    pub injection: Option<Injection>,
    pub down: Vec<DownStage>,
    pub mid: MidStage,
    pub up: Vec<UpStage>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
    pub schedule: Option<Arc<AnnealingSchedule>>,
}

impl_params!(UNetModel {
    time_embedding,
    text_embedding,
    conv_in,
    injection,
    down,
    mid,
    up,
    norm_out,
    conv_out
});

/// Every stage output of one forward pass, in [`STAGE_NAMES`] order.
pub struct UNetFeatures {
    pub stages: Vec<Tensor>,
}

impl UNetFeatures {
    pub fn output(&self) -> &Tensor {
        &self.stages[STAGE_NAMES.len() - 1]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        STAGE_NAMES.iter().position(|s| *s == name).map(|i| &self.stages[i])
    }
}

fn has_attention(depth: Depth) -> bool {
    depth != Depth::IV
}

/// Build a freshly initialized U-Net.
pub fn build_unet(config: &UNetConfig, init: &mut Init) -> Result<UNetModel> {
    config.validate()?;
    let groups = config.norm_groups;
    let c0 = config.stem_channels();
    let temb_dim = config.time_embed_dim();
    let mut time_embedding = TimeEmbedding {
        linear1: Linear::new(c0, temb_dim, true, init)?,
        linear2: Linear::new(temb_dim, temb_dim, true, init)?,
    };
    nn::freeze(&mut time_embedding);
    let text_embedding = init.normal(&[config.context_dim], 1.0)?;
    let first = config.channels(Depth::I);
    let conv_in = Conv2d::new(ConvSpec::new(config.latent_channels, first, 3), init)?;
    let injection = if config.injection_channels > 0 {
        Some(Injection::new(config.injection_channels, first, init)?)
    } else {
        None
    };

    let transformer = |c: usize, init: &mut Init| {
        SpatialTransformer::new(
            c,
            config.context_dim,
            config.heads(c),
            groups,
            config.ffn_mult,
            config.ffn_gated,
            init,
        )
    };

    let mut skip_channels = vec![first];
    let mut cur = first;
    let mut down = Vec::with_capacity(4);
    for depth in Depth::ALL {
        let out = config.channels(depth);
        let mut resnets = Vec::new();
        let mut attentions = Vec::new();
        for _ in 0..config.blocks_per_depth {
            resnets.push(Slot::Plain(ResBlock::new(cur, out, temb_dim, groups, init)?));
            cur = out;
            if has_attention(depth) {
                attentions.push(transformer(cur, init)?);
            }
            skip_channels.push(cur);
        }
        let downsample = if depth != Depth::IV {
            skip_channels.push(cur);
            Some(Slot::Plain(Downsample::new(cur, init)?))
        } else {
            None
        };
        down.push(DownStage {
            resnets,
            attentions,
            downsample,
        });
    }

    let mid = MidStage {
        resnets: vec![
            Slot::Plain(ResBlock::new(cur, cur, temb_dim, groups, init)?),
            Slot::Plain(ResBlock::new(cur, cur, temb_dim, groups, init)?),
        ],
        attentions: vec![transformer(cur, init)?],
    };

    let mut up = Vec::with_capacity(4);
    for depth in Depth::ALL.iter().rev().copied() {
        let out = config.channels(depth);
        let mut resnets = Vec::new();
        let mut attentions = Vec::new();
        for _ in 0..config.blocks_per_depth + 1 {
            let skip = skip_channels
                .pop()
                .ok_or_else(|| Error::Config("skip stack exhausted".into()))?;
            resnets.push(Slot::Plain(ResBlock::new(cur + skip, out, temb_dim, groups, init)?));
            cur = out;
            if has_attention(depth) {
                attentions.push(transformer(cur, init)?);
            }
        }
        let upsample = if depth != Depth::I {
            Some(Slot::Plain(Upsample::new(cur, init)?))
        } else {
            None
        };
        up.push(UpStage {
            resnets,
            attentions,
            upsample,
        });
    }

    Ok(UNetModel {
        config: config.clone(),
        time_embedding,
        text_embedding,
        conv_in,
        injection,
        down,
        mid,
        up,
        norm_out: GroupNorm::new(cur, groups, init)?,
        conv_out: Conv2d::new(ConvSpec::new(cur, config.latent_channels, 3), init)?,
        schedule: None,
    })
}

impl UNetModel {
    pub fn device(&self) -> &Device {
        self.conv_in.weight.device()
    }

    pub fn dtype(&self) -> DType {
        self.conv_in.weight.dtype()
    }

    /// Embedding of the fixed timestep, `[1, time_embed_dim]`.
    pub fn timestep_embedding(&self) -> Result<Tensor> {
        let sin = sinusoidal_embedding(
            FIXED_TIMESTEP,
            self.time_embedding.linear1.in_features(),
            self.device(),
            self.dtype(),
        )?;
        let h = self.time_embedding.linear1.forward(&sin)?.silu()?;
        self.time_embedding.linear2.forward(&h)
    }

    /// Learned text embedding as a one-token context, `[N, 1, context_dim]`.
    pub fn context(&self, batch: usize) -> Result<Tensor> {
        let d = self.text_embedding.dim(0)?;
        Ok(self
            .text_embedding
            .reshape((1, 1, d))?
            .broadcast_as((batch, 1, d))?
            .contiguous()?)
    }

    pub fn forward(&self, latent: &Tensor, injected: Option<&Tensor>) -> Result<Tensor> {
        let mut features = self.forward_features(latent, injected)?;
        features
            .stages
            .pop()
            .ok_or_else(|| Error::Shape("U-Net produced no output".into()))
    }

    pub fn forward_features(&self, latent: &Tensor, injected: Option<&Tensor>) -> Result<UNetFeatures> {
        let (n, c, h, w) = latent.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, U-Net expects {}",
                self.config.latent_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "latent spatial size {h}x{w} must be divisible by 8"
            )));
        }
        let temb = self.timestep_embedding()?;
        let context = self.context(n)?;
        let cond = Cond {
            temb: &temb,
            context: &context,
        };
        let mut x = self.conv_in.forward(latent)?;
        if let Some(feature) = injected {
            let injection = self.injection.as_ref().ok_or_else(|| {
                Error::InvalidArgument("U-Net was built without an injection path".into())
            })?;
            x = injection.forward(&x, feature)?;
        }
        let mut skips = vec![x.clone()];
        let mut stages = Vec::with_capacity(STAGE_NAMES.len());
        for stage in &self.down {
            for (i, res) in stage.resnets.iter().enumerate() {
                x = res.forward(&x, &cond)?;
                if let Some(attn) = stage.attentions.get(i) {
                    x = attn.forward(&x, &cond)?;
                }
                skips.push(x.clone());
            }
            if let Some(ds) = &stage.downsample {
                x = ds.forward(&x, &cond)?;
                skips.push(x.clone());
            }
            stages.push(x.clone());
        }
        x = self.mid.resnets[0].forward(&x, &cond)?;
        x = self.mid.attentions[0].forward(&x, &cond)?;
        x = self.mid.resnets[1].forward(&x, &cond)?;
        stages.push(x.clone());
        for stage in &self.up {
            for (i, res) in stage.resnets.iter().enumerate() {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Shape("skip stack exhausted".into()))?;
                x = res.forward(&Tensor::cat(&[&x, &skip], 1)?, &cond)?;
                if let Some(attn) = stage.attentions.get(i) {
                    x = attn.forward(&x, &cond)?;
                }
            }
            if let Some(us) = &stage.upsample {
                x = us.forward(&x, &cond)?;
            }
            stages.push(x.clone());
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        stages.push(out);
        Ok(UNetFeatures { stages })
    }

    /// Visit every prunable position with its depth label.
    pub fn for_each_slot(&self, f: &mut dyn FnMut(&str, DepthEntry, &dyn SlotControl)) {
        let entry = |kind, depth, position| DepthEntry {
            kind,
            depth,
            position,
        };
        for (d, stage) in self.down.iter().enumerate() {
            let depth = Depth::from_index(d).unwrap_or(Depth::IV);
            for (i, res) in stage.resnets.iter().enumerate() {
                f(
                    &format!("down.{d}.resnets.{i}"),
                    entry(ModuleKind::Resblock, depth, Position::Down),
                    res,
                );
                if let Some(t) = stage.attentions.get(i) {
                    visit_transformer(&format!("down.{d}.attentions.{i}"), t, depth, Position::Down, f);
                }
            }
            if let Some(ds) = &stage.downsample {
                f(
                    &format!("down.{d}.downsample"),
                    entry(ModuleKind::Resblock, depth, Position::Down),
                    ds,
                );
            }
        }
        f("mid.resnets.0", entry(ModuleKind::Resblock, Depth::IV, Position::Mid), &self.mid.resnets[0]);
        visit_transformer("mid.attentions.0", &self.mid.attentions[0], Depth::IV, Position::Mid, f);
        f("mid.resnets.1", entry(ModuleKind::Resblock, Depth::IV, Position::Mid), &self.mid.resnets[1]);
        for (u, stage) in self.up.iter().enumerate() {
            let depth = Depth::from_index(3 - u).unwrap_or(Depth::I);
            for (i, res) in stage.resnets.iter().enumerate() {
                f(
                    &format!("up.{u}.resnets.{i}"),
                    entry(ModuleKind::Resblock, depth, Position::Up),
                    res,
                );
                if let Some(t) = stage.attentions.get(i) {
                    visit_transformer(&format!("up.{u}.attentions.{i}"), t, depth, Position::Up, f);
                }
            }
            if let Some(us) = &stage.upsample {
                f(
                    &format!("up.{u}.upsample"),
                    entry(ModuleKind::Resblock, depth, Position::Up),
                    us,
                );
            }
        }
    }

    pub fn for_each_slot_mut(
        &mut self,
        f: &mut dyn FnMut(&str, DepthEntry, &mut dyn SlotControl) -> Result<()>,
    ) -> Result<()> {
        let entry = |kind, depth, position| DepthEntry {
            kind,
            depth,
            position,
        };
        for (d, stage) in self.down.iter_mut().enumerate() {
            let depth = Depth::from_index(d).unwrap_or(Depth::IV);
            for (i, res) in stage.resnets.iter_mut().enumerate() {
                f(
                    &format!("down.{d}.resnets.{i}"),
                    entry(ModuleKind::Resblock, depth, Position::Down),
                    res,
                )?;
                if let Some(t) = stage.attentions.get_mut(i) {
                    visit_transformer_mut(&format!("down.{d}.attentions.{i}"), t, depth, Position::Down, f)?;
                }
            }
            if let Some(ds) = &mut stage.downsample {
                f(
                    &format!("down.{d}.downsample"),
                    entry(ModuleKind::Resblock, depth, Position::Down),
                    ds,
                )?;
            }
        }
        let (first, second) = self.mid.resnets.split_at_mut(1);
        f("mid.resnets.0", entry(ModuleKind::Resblock, Depth::IV, Position::Mid), &mut first[0])?;
        visit_transformer_mut("mid.attentions.0", &mut self.mid.attentions[0], Depth::IV, Position::Mid, f)?;
        f("mid.resnets.1", entry(ModuleKind::Resblock, Depth::IV, Position::Mid), &mut second[0])?;
        for (u, stage) in self.up.iter_mut().enumerate() {
            let depth = Depth::from_index(3 - u).unwrap_or(Depth::I);
            for (i, res) in stage.resnets.iter_mut().enumerate() {
                f(
                    &format!("up.{u}.resnets.{i}"),
                    entry(ModuleKind::Resblock, depth, Position::Up),
                    res,
                )?;
                if let Some(t) = stage.attentions.get_mut(i) {
                    visit_transformer_mut(&format!("up.{u}.attentions.{i}"), t, depth, Position::Up, f)?;
                }
            }
            if let Some(us) = &mut stage.upsample {
                f(
                    &format!("up.{u}.upsample"),
                    entry(ModuleKind::Resblock, depth, Position::Up),
                    us,
                )?;
            }
        }
        Ok(())
    }

    /// Depth label of every resblock, self-attention, cross-attention and FFN.
    pub fn label_depths(&self) -> DepthMap {
        let mut map = DepthMap::default();
        self.for_each_slot(&mut |id, entry, _| map.entries.push((id.to_string(), entry)));
        map
    }
}

fn visit_transformer(
    prefix: &str,
    t: &SpatialTransformer,
    depth: Depth,
    position: Position,
    f: &mut dyn FnMut(&str, DepthEntry, &dyn SlotControl),
) {
    let e = |kind| DepthEntry {
        kind,
        depth,
        position,
    };
    f(&format!("{prefix}.attn1"), e(ModuleKind::SelfAttention), &t.attn1);
    f(&format!("{prefix}.attn2"), e(ModuleKind::CrossAttention), &t.attn2);
    f(&format!("{prefix}.ff"), e(ModuleKind::Ffn), &t.ff);
}

fn visit_transformer_mut(
    prefix: &str,
    t: &mut SpatialTransformer,
    depth: Depth,
    position: Position,
    f: &mut dyn FnMut(&str, DepthEntry, &mut dyn SlotControl) -> Result<()>,
) -> Result<()> {
    let e = |kind| DepthEntry {
        kind,
        depth,
        position,
    };
    f(&format!("{prefix}.attn1"), e(ModuleKind::SelfAttention), &mut t.attn1)?;
    f(&format!("{prefix}.attn2"), e(ModuleKind::CrossAttention), &mut t.attn2)?;
    f(&format!("{prefix}.ff"), e(ModuleKind::Ffn), &mut t.ff)
}
