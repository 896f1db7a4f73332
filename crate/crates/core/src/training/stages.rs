//! Stage 1: LiteED and the full U-Net trained end to end.
//! Stage 2: frozen LiteED, channel-narrowed student distilled from the
//! stage-1 teacher, then annealed module replacement and finalization.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::build_unet;
use crate::config::RunConfig;
use crate::distillation::{distill_loss, register_taps, DistillConfig};
use crate::error::{Error, Result};
use crate::lite_ed::resize_bicubic;
use crate::nn::{self, Init, Params};
use crate::pipeline::PocketSr;
use crate::pruning::{self, channel_prune, inherit_weights};

use super::data::ImageDataset;
use super::degrade::degrade;
use super::log::{LogWriter, TrainRecord};
use super::losses::{compose_loss, discriminator_hinge, PatchDiscriminator, RandomConvPerceptual, Stage};
use super::optim::Optimizer;

struct Trainer<'a> {
    run: &'a RunConfig,
    dataset: &'a ImageDataset,
    device: Device,
    rng: ChaCha8Rng,
    perceptual: RandomConvPerceptual,
    log: Option<LogWriter>,
    records: Vec<TrainRecord>,
    samples_drawn: u64,
}

impl<'a> Trainer<'a> {
    fn new(run: &'a RunConfig, dataset: &'a ImageDataset, device: &Device, log: Option<&Path>, stream: u64) -> Result<Self> {
        run.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(stream);
        Ok(Self {
            run,
            dataset,
            device: device.clone(),
            rng,
            perceptual: RandomConvPerceptual::new(device, DType::F32)?,
            log: log.map(LogWriter::create).transpose()?,
            records: Vec::new(),
            samples_drawn: 0,
        })
    }

    /// HR crops and their degraded inputs upsampled back to HR size.
    fn batch(&mut self) -> Result<(Tensor, Tensor)> {
        let t = &self.run.train;
        let scale = self.run.model.scale;
        let hr = self
            .dataset
            .sample_batch(&mut self.rng, t.batch_size, t.crop_size, 8 * scale, &self.device)?;
        let lr = degrade(&hr, &self.run.degrade, self.samples_drawn)?;
        self.samples_drawn += t.batch_size as u64;
        let up = resize_bicubic(&lr, t.crop_size, t.crop_size, false)?;
        Ok((hr, up))
    }

    fn record(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.write(&record)?;
        }
        log::debug!(
            "{} step {} sigma {:.4} total {:.5}",
            record.phase,
            record.step,
            record.sigma,
            record.loss.total
        );
        self.records.push(record);
        Ok(())
    }

    fn discriminator_step(
        &self,
        disc: &PatchDiscriminator,
        opt: &mut Optimizer,
        hr: &Tensor,
        sr: &Tensor,
    ) -> Result<Option<f64>> {
        if !self.run.train.adversarial {
            return Ok(None);
        }
        let d_loss = discriminator_hinge(&disc.forward(hr)?, &disc.forward(&sr.detach())?)?;
        opt.backward_step(&d_loss)?;
        Ok(Some(d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?))
    }
}

fn optimizer_for(parts: &[&dyn Params], lr: f64, wd: f64, clip: f64) -> Result<Optimizer> {
    let mut vars = Vec::new();
    for p in parts {
        vars.extend(nn::trainable_vars(*p)?);
    }
    Optimizer::new(vars, lr, wd, Some(clip))
}

pub struct Stage1Output {
    pub model: PocketSr,
    pub discriminator: PatchDiscriminator,
    pub records: Vec<TrainRecord>,
}

/// Train LiteED and the full U-Net end to end.
pub fn train_stage1(run: &RunConfig, dataset: &ImageDataset, device: &Device, log: Option<&Path>) -> Result<Stage1Output> {
    let mut trainer = Trainer::new(run, dataset, device, log, 1)?;
    let mut init = Init::new(run.seed, device, DType::F32);
    let model = PocketSr::new(&run.model, &mut init)?;
    let disc = PatchDiscriminator::new(run.train.disc_channels, &mut init)?;
    let t = &run.train;
    let mut opt_g = optimizer_for(&[&model], t.learning_rate, t.weight_decay, t.grad_clip)?;
    let mut opt_d = optimizer_for(&[&disc], t.disc_learning_rate, t.weight_decay, t.grad_clip)?;
    for step in 0..t.steps_stage1 {
        let (hr, up) = trainer.batch()?;
        let sr = model.forward(&up)?;
        let scores = if t.adversarial { Some(disc.forward(&sr)?) } else { None };
        let (total, values) = compose_loss(&sr, &hr, &trainer.perceptual, scores.as_ref(), None, &run.loss, Stage::One)?;
        let grad_norm = opt_g.backward_step(&total)?;
        let d_loss = trainer.discriminator_step(&disc, &mut opt_d, &hr, &sr)?;
        trainer.record(TrainRecord {
            stage: 1,
            phase: "stage1".into(),
            step,
            sigma: 1.0,
            lr: opt_g.learning_rate(),
            loss: values,
            d_loss,
            grad_norm,
        })?;
    }
    Ok(Stage1Output {
        model,
        discriminator: disc,
        records: trainer.records,
    })
}

/// Weight hashes recorded around stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeReport {
    pub liteed_before: String,
    pub liteed_after: String,
    pub teacher_before: String,
    pub teacher_after: String,
}

impl FreezeReport {
    pub fn holds(&self) -> bool {
        self.liteed_before == self.liteed_after && self.teacher_before == self.teacher_after
    }
}

pub struct Stage2Output {
    /// Finalized compact model.
    pub student: PocketSr,
    /// The student at `t = T`, before finalization (annealed pairs intact).
    pub annealed: PocketSr,
    pub distill: Option<DistillConfig>,
    pub discriminator: PatchDiscriminator,
    pub records: Vec<TrainRecord>,
    pub freeze: FreezeReport,
}

fn liteed_hash(model: &PocketSr) -> Result<String> {
    let mut h = nn::weight_hash(&model.encoder)?;
    h.push_str(&nn::weight_hash(&model.decoder)?);
    Ok(h)
}

/// Channel pruning with distillation, then annealed module replacement,
/// against a frozen copy of the stage-1 `teacher`.
pub fn train_stage2(
    run: &RunConfig,
    teacher: &PocketSr,
    dataset: &ImageDataset,
    device: &Device,
    log: Option<&Path>,
) -> Result<Stage2Output> {
    let mut trainer = Trainer::new(run, dataset, device, log, 2)?;
    let teacher = nn::frozen_copy(teacher)?;
    let teacher_before = nn::weight_hash(&teacher)?;
    let liteed_before = liteed_hash(&teacher)?;
    if teacher.unet.schedule.is_some() || pruning::plan::slot_states(&teacher.unet).2 > 0 {
        return Err(Error::InvalidArgument("the teacher must be an unpruned stage-1 model".into()));
    }

    let mut init = Init::new(run.seed.wrapping_add(2), device, DType::F32);
    let plan = &run.prune;
    let mut student_cfg = teacher.config.clone();
    student_cfg.unet = channel_prune(&teacher.config.unet, plan.channel_ratio)?;
    let mut unet = build_unet(&student_cfg.unet, &mut init)?;
    inherit_weights(&mut unet, &teacher.unet)?;
    let mut student = PocketSr {
        config: student_cfg,
        encoder: nn::frozen_copy(&teacher.encoder)?,
        unet,
        decoder: nn::frozen_copy(&teacher.decoder)?,
    };
    let distill = if run.distill.enabled {
        Some(register_taps(&teacher.unet, &student.unet, &run.distill.taps, &init)?)
    } else {
        None
    };
    let disc = PatchDiscriminator::new(run.train.disc_channels, &mut init)?;
    let t = &run.train;
    let mut opt_d = optimizer_for(&[&disc], t.disc_learning_rate, t.weight_decay, t.grad_clip)?;

    for phase in ["channel", "anneal"] {
        let steps = if phase == "channel" {
            t.steps_channel
        } else {
            pruning::apply_plan(&mut student.unet, plan, t.steps_anneal, &mut init)?;
            t.steps_anneal
        };
        let mut parts: Vec<&dyn Params> = vec![&student];
        if let Some(d) = &distill {
            parts.push(d);
        }
        let mut opt_g = optimizer_for(&parts, t.learning_rate, t.weight_decay, t.grad_clip)?;
        for step in 0..steps {
            let sigma = student.unet.schedule.as_ref().map_or(1.0, |s| s.sigma());
            let (hr, up) = trainer.batch()?;
            let pred = student.predict(&up)?;
            let distill_value = match &distill {
                Some(d) => {
                    let enc = teacher.encoder.encode(&up)?;
                    let injected = teacher.config.use_dfi.then_some(&enc.dfi_feature);
                    let tf = teacher.unet.forward_features(&enc.latent, injected)?;
                    Some(distill_loss(&d.select(&tf)?, &d.select(&pred.features)?, d)?)
                }
                None => None,
            };
            let scores = if t.adversarial {
                Some(disc.forward(&pred.image)?)
            } else {
                None
            };
            let (total, values) = compose_loss(
                &pred.image,
                &hr,
                &trainer.perceptual,
                scores.as_ref(),
                distill_value.as_ref(),
                &run.loss,
                Stage::Two,
            )?;
            let grad_norm = opt_g.backward_step(&total)?;
            let d_loss = trainer.discriminator_step(&disc, &mut opt_d, &hr, &pred.image)?;
            if let Some(s) = &student.unet.schedule {
                s.advance();
            }
            trainer.record(TrainRecord {
                stage: 2,
                phase: phase.into(),
                step,
                sigma,
                lr: opt_g.learning_rate(),
                loss: values,
                d_loss,
                grad_norm,
            })?;
        }
    }

    let annealed = student.clone();
    pruning::finalize(&mut student.unet)?;
    let freeze = FreezeReport {
        liteed_before,
        liteed_after: liteed_hash(&student)?,
        teacher_before,
        teacher_after: nn::weight_hash(&teacher)?,
    };
    if !freeze.holds() {
        return Err(Error::InvalidArgument(
            "frozen LiteED or teacher weights changed during stage 2".into(),
        ));
    }
    Ok(Stage2Output {
        student,
        annealed,
        distill,
        discriminator: disc,
        records: trainer.records,
        freeze,
    })
}
