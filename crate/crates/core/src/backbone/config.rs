use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum channel count any U-Net level may be narrowed to.
pub const MIN_CHANNELS: usize = 8;

/// Fixed diffusion timestep for one-step inference.
pub const FIXED_TIMESTEP: u32 = 999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_depth: usize,
    pub attention_head_dim: usize,
    pub latent_channels: usize,
    pub width_ratio: f64,
    pub context_dim: usize,
    pub norm_groups: usize,
    /// GEGLU feed-forward (SD layout) instead of a plain two-layer MLP.
    pub ffn_gated: bool,
    pub ffn_mult: usize,
    /// Channels of the injected encoder feature; 0 builds no injection path.
    pub injection_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl UNetConfig {
    /// SD-2.x sized U-Net (SD-Turbo layout).
    pub fn full_scale() -> Self {
        Self {
            base_channels: 320,
            channel_multipliers: vec![1, 2, 4, 4],
            blocks_per_depth: 2,
            attention_head_dim: 64,
            latent_channels: 4,
            width_ratio: 1.0,
            context_dim: 1024,
            norm_groups: 32,
            ffn_gated: true,
            ffn_mult: 4,
            injection_channels: 320,
        }
    }

    /// Desk-scale configuration used by tests and toy training runs.
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4, 4],
            blocks_per_depth: 2,
            attention_head_dim: 8,
            latent_channels: 4,
            width_ratio: 1.0,
            context_dim: 32,
            norm_groups: 8,
            ffn_gated: true,
            ffn_mult: 4,
            injection_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() != 4 {
            return Err(Error::Config(format!(
                "channel_multipliers must have 4 entries, got {}",
                self.channel_multipliers.len()
            )));
        }
        if !(self.width_ratio > 0.0 && self.width_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "width_ratio must lie in (0, 1], got {}",
                self.width_ratio
            )));
        }
        if self.base_channels == 0
            || self.blocks_per_depth == 0
            || self.attention_head_dim == 0
            || self.latent_channels == 0
            || self.context_dim == 0
            || self.norm_groups == 0
            || self.ffn_mult == 0
        {
            return Err(Error::Config("all size fields must be positive".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        for depth in Depth::ALL {
            let c = self.raw_channels(depth);
            if c < MIN_CHANNELS {
                return Err(Error::Config(format!(
                    "depth {depth} narrows to {c} channels, below the minimum of {MIN_CHANNELS}"
                )));
            }
        }
        Ok(())
    }

    fn raw_channels(&self, depth: Depth) -> usize {
        let m = self.channel_multipliers[depth.index()];
        (self.width_ratio * (self.base_channels * m) as f64).round() as usize
    }

    /// Effective channel count at a depth: round(width_ratio × base × multiplier).
    pub fn channels(&self, depth: Depth) -> usize {
        self.raw_channels(depth)
    }

    /// Effective width of the initial block (depth I without multiplier).
    pub fn stem_channels(&self) -> usize {
        (self.width_ratio * self.base_channels as f64).round() as usize
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.stem_channels()
    }

    pub fn heads(&self, channels: usize) -> usize {
        if channels % self.attention_head_dim == 0 {
            channels / self.attention_head_dim
        } else {
            1
        }
    }
}

/// U-Net resolution level, I shallowest to IV deepest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Depth {
    I,
    II,
    III,
    IV,
}

impl Depth {
    pub const ALL: [Depth; 4] = [Depth::I, Depth::II, Depth::III, Depth::IV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Depth> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Depth::I => "I",
            Depth::II => "II",
            Depth::III => "III",
            Depth::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for Depth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" => Ok(Depth::I),
            "II" => Ok(Depth::II),
            "III" => Ok(Depth::III),
            "IV" => Ok(Depth::IV),
            other => Err(Error::InvalidArgument(format!("unknown depth `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Resblock,
    SelfAttention,
    CrossAttention,
    Ffn,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Resblock,
        ModuleKind::SelfAttention,
        ModuleKind::CrossAttention,
        ModuleKind::Ffn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Resblock => "resblock",
            ModuleKind::SelfAttention => "self_attention",
            ModuleKind::CrossAttention => "cross_attention",
            ModuleKind::Ffn => "ffn",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "resblock" => Ok(ModuleKind::Resblock),
            "self_attention" => Ok(ModuleKind::SelfAttention),
            "cross_attention" => Ok(ModuleKind::CrossAttention),
            "ffn" => Ok(ModuleKind::Ffn),
            other => Err(Error::InvalidArgument(format!("unknown module kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Down,
    Mid,
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthEntry {
    pub kind: ModuleKind,
    pub depth: Depth,
    pub position: Position,
}

/// Depth labels for every prunable submodule, in network order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthMap {
    pub entries: Vec<(String, DepthEntry)>,
}

impl DepthMap {
    pub fn get(&self, id: &str) -> Option<&DepthEntry> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, e)| e)
    }

    pub fn count(&self, kind: ModuleKind, depth: Depth) -> usize {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == kind && e.depth == depth)
            .count()
    }

    pub fn ids(&self, kind: ModuleKind, depth: Depth) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, e)| e.kind == kind && e.depth == depth)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
