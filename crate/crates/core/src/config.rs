//! Run configuration: presets, TOML files with dotted keys, environment and
//! `key=value` overrides. Precedence is overrides > environment > file > preset.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::distillation::default_taps;
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::pruning::PruningPlan;
use crate::training::degrade::DegradationConfig;
use crate::training::losses::LossWeights;

pub const SEED_ENV: &str = "POCKETSR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    pub enabled: bool,
    /// Stage-output names: `down.0`..`down.3`, `mid`, `up.0`..`up.3`, `out`.
    pub taps: Vec<String>,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            taps: default_taps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps_stage1: u64,
    pub steps_channel: u64,
    pub steps_anneal: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adversarial: bool,
    pub disc_learning_rate: f64,
    pub disc_channels: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainSettings {
    pub fn toy() -> Self {
        Self {
            steps_stage1: 200,
            steps_channel: 200,
            steps_anneal: 100,
            batch_size: 4,
            crop_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            adversarial: true,
            disc_learning_rate: 1e-4,
            disc_channels: 8,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            steps_stage1: 80_000,
            steps_channel: 80_000,
            steps_anneal: 8_000,
            batch_size: 64,
            crop_size: 512,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            adversarial: true,
            disc_learning_rate: 1e-4,
            disc_channels: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSettings {
    /// HR-pixel tile edge above which inference is tiled.
    pub tile: usize,
    pub overlap: usize,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self { tile: 512, overlap: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSettings {
    pub dataset: String,
    pub output: String,
    pub teacher: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub prune: PruningPlan,
    pub distill: DistillSettings,
    pub train: TrainSettings,
    pub loss: LossWeights,
    pub degrade: DegradationConfig,
    pub infer: InferSettings,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            seed: 0,
            model: ModelConfig::toy(),
            prune: PruningPlan::default(),
            distill: DistillSettings::default(),
            train: TrainSettings::toy(),
            loss: LossWeights::default(),
            degrade: DegradationConfig::default(),
            infer: InferSettings::default(),
            paths: PathSettings::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            preset: "full_scale".into(),
            model: ModelConfig::full_scale(),
            train: TrainSettings::full_scale(),
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full_scale" => Ok(Self::full_scale()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `toy` or `full_scale`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate()?;
        self.loss.validate()?;
        self.degrade.validate()?;
        if self.degrade.scale != self.model.scale {
            return Err(Error::Config(format!(
                "degrade.scale ({}) must equal model.scale ({})",
                self.degrade.scale, self.model.scale
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.steps_anneal == 0 {
            return Err(Error::Config(
                "train.batch_size and train.steps_anneal must be positive".into(),
            ));
        }
        if t.crop_size % (8 * self.model.scale) != 0 {
            return Err(Error::Config(format!(
                "train.crop_size ({}) must be a multiple of {}",
                t.crop_size,
                8 * self.model.scale
            )));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolve the final configuration. `preset` (if given) overrides the
    /// file's `preset` key; `overrides` are `dotted.key=value` strings whose
    /// values are TOML literals (bare words are taken as strings).
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&str>,
        env_seed: Option<&str>,
        overrides: &[String],
    ) -> Result<Self> {
        let file_table: Table = match file {
            Some(text) => text
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => Table::new(),
        };
        let mut parsed_overrides = Vec::with_capacity(overrides.len());
        for o in overrides {
            parsed_overrides.push(parse_override(o)?);
        }
        let preset_name = parsed_overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .and_then(|(_, v)| v.as_str().map(str::to_owned))
            .or_else(|| preset.map(str::to_owned))
            .or_else(|| file_table.get("preset").and_then(|v| v.as_str()).map(str::to_owned))
            .unwrap_or_else(|| "toy".to_owned());
        let base = Self::preset(&preset_name)?;
        let mut tree = Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, &Value::Table(file_table), "")?;
        if let Some(seed) = env_seed {
            let seed: i64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an integer")))?;
            set_path(&mut tree, "seed", Value::Integer(seed))?;
        }
        for (key, value) in parsed_overrides {
            set_path(&mut tree, &key, value)?;
        }
        set_path(&mut tree, "preset", Value::String(preset_name))?;
        let config: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim().to_owned();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key, value))
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_owned()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Recursively overlay `src` onto `dst`, rejecting keys `dst` does not have.
fn merge(dst: &mut Value, src: &Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                let path = join(prefix, k);
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::UnknownKey(path)),
                }
            }
            Ok(())
        }
        (d, s) => {
            if s.is_table() {
                return Err(Error::UnknownKey(format!("{prefix}.*")));
            }
            *d = s.clone();
            Ok(())
        }
    }
}

fn set_path(tree: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut cur = tree;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::UnknownKey(dotted.to_owned()))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::UnknownKey(dotted.to_owned()))?;
        if i + 1 == parts.len() {
            if slot.is_table() && !value.is_table() {
                return Err(Error::UnknownKey(dotted.to_owned()));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::UnknownKey(dotted.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() -> Result<()> {
        for cfg in [RunConfig::toy(), RunConfig::full_scale()] {
            let text = cfg.to_toml_string()?;
            let back = RunConfig::resolve(None, Some(&text), None, &[])?;
            assert_eq!(back, cfg);
        }
        Ok(())
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::resolve(None, Some("[train]\nstepz = 3\n"), None, &[]).unwrap_err();
        assert!(err.to_string().contains("train.stepz"), "{err}");
        let err = RunConfig::resolve(None, None, None, &["model.unet.widthh=0.5".into()]).unwrap_err();
        assert!(err.to_string().contains("model.unet.widthh"), "{err}");
    }

    #[test]
    fn precedence_flags_over_env_over_file() -> Result<()> {
        let file = "seed = 3\n[train]\nbatch_size = 2\n";
        let cfg = RunConfig::resolve(None, Some(file), None, &[])?;
        assert_eq!((cfg.seed, cfg.train.batch_size), (3, 2));
        let cfg = RunConfig::resolve(None, Some(file), Some("9"), &[])?;
        assert_eq!(cfg.seed, 9);
        let cfg = RunConfig::resolve(None, Some(file), Some("9"), &["seed=11".into(), "train.batch_size=5".into()])?;
        assert_eq!((cfg.seed, cfg.train.batch_size), (11, 5));
        let cfg = RunConfig::resolve(None, None, None, &["prune.resblock_depths=[\"IV\"]".into()])?;
        assert_eq!(cfg.prune.resblock_depths.len(), 1);
        Ok(())
    }

    #[test]
    fn preset_selects_full_scale() -> Result<()> {
        let cfg = RunConfig::resolve(None, Some("preset = \"full_scale\"\n"), None, &[])?;
        assert_eq!(cfg.model.unet.base_channels, 320);
        let cfg = RunConfig::resolve(Some("full_scale"), None, None, &[])?;
        assert_eq!(cfg.train.batch_size, 64);
        Ok(())
    }
}
