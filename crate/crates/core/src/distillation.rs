//! Multi-layer feature distillation from a wide teacher U-Net to a pruned
//! student through per-tap 1×1 projections.

use candle_core::Tensor;

use crate::backbone::unet::{UNetFeatures, STAGE_NAMES};
use crate::backbone::{Depth, UNetModel};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{Conv2d, ConvSpec, Init};

/// Stage outputs tapped by default: every down stage, the mid block and every
/// up stage.
pub fn default_taps() -> Vec<String> {
    STAGE_NAMES[..9].iter().map(|s| s.to_string()).collect()
}

/// Channel count of a named stage output.
pub fn tap_channels(model: &UNetModel, tap: &str) -> Result<usize> {
    let cfg = &model.config;
    let (head, index) = match tap.split_once('.') {
        Some((h, i)) => (h, i.parse::<usize>().ok()),
        None => (tap, None),
    };
    let depth = |i: usize| Depth::from_index(i).ok_or_else(|| Error::InvalidArgument(format!("unknown tap `{tap}`")));
    match (head, index) {
        ("down", Some(i)) if i < 4 => Ok(cfg.channels(depth(i)?)),
        ("mid", None) => Ok(cfg.channels(Depth::IV)),
        ("up", Some(i)) if i < 4 => Ok(cfg.channels(depth(3 - i)?)),
        ("out", None) => Ok(cfg.latent_channels),
        _ => Err(Error::InvalidArgument(format!(
            "unknown tap `{tap}`; expected one of {}",
            STAGE_NAMES.join(", ")
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub taps: Vec<String>,
    pub projections: Vec<Conv2d>,
}

impl_params!(DistillConfig { projections });

/// 1×1 conv from `cin` to `cout` with ones on the leading diagonal and zero
/// bias; the identity when the widths match.
fn identity_projection(cin: usize, cout: usize, init: &Init) -> Result<Conv2d> {
    let mut w = vec![0.0; cout * cin];
    for i in 0..cin.min(cout) {
        w[i * cin + i] = 1.0;
    }
    Ok(Conv2d {
        weight: init.trainable(w, &[cout, cin, 1, 1])?,
        bias: Some(init.constant(&[cout], 0.0)?),
        ..Conv2d::zeros(ConvSpec::new(cin, cout, 1), init)?
    })
}

/// Pair teacher and student stage outputs named in `taps`, with one
/// projection per tap from student width to teacher width.
pub fn register_taps(
    teacher: &UNetModel,
    student: &UNetModel,
    taps: &[String],
    init: &Init,
) -> Result<DistillConfig> {
    let (tc, sc) = (&teacher.config, &student.config);
    if tc.channel_multipliers.len() != sc.channel_multipliers.len()
        || tc.blocks_per_depth != sc.blocks_per_depth
        || tc.latent_channels != sc.latent_channels
    {
        return Err(Error::InvalidArgument(
            "teacher and student stage structures differ".into(),
        ));
    }
    if taps.is_empty() {
        return Err(Error::InvalidArgument("distillation needs at least one tap".into()));
    }
    let projections = taps
        .iter()
        .map(|t| identity_projection(tap_channels(student, t)?, tap_channels(teacher, t)?, init))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistillConfig {
        taps: taps.to_vec(),
        projections,
    })
}

impl DistillConfig {
    /// Pick this config's taps out of a forward pass, in tap order.
    pub fn select(&self, features: &UNetFeatures) -> Result<Vec<Tensor>> {
        self.taps
            .iter()
            .map(|t| {
                features
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown tap `{t}`")))
            })
            .collect()
    }
}

/// `Σ_l mean_elements((f_teacher − φ_l(f_student))²)`. Per-tap means over all
/// elements equal the batch mean of per-sample means. Teacher features are
/// detached.
pub fn distill_loss(teacher: &[Tensor], student: &[Tensor], config: &DistillConfig) -> Result<Tensor> {
    if teacher.len() != config.taps.len() || student.len() != config.taps.len() {
        return Err(Error::Shape(format!(
            "{} taps configured, got {} teacher and {} student features",
            config.taps.len(),
            teacher.len(),
            student.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((t, s), proj) in teacher.iter().zip(student).zip(&config.projections) {
        let projected = proj.forward(s)?;
        if projected.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "projected student feature {:?} does not match teacher feature {:?}",
                projected.dims(),
                t.dims()
            )));
        }
        let term = (t.detach() - projected)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("distillation needs at least one tap".into()))
}
