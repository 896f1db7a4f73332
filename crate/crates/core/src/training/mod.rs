//! Two-stage training: data, degradation, losses, optimizer and loops.

pub mod data;
pub mod degrade;
pub mod log;
pub mod losses;
pub mod optim;
pub mod stages;

pub use data::{write_synthetic_dataset, ImageDataset};
pub use degrade::{degrade, DegradationConfig, Degrader, FirstOrderDegrader};
pub use log::{read_log, LogWriter, TrainRecord};
pub use losses::{
    adversarial_losses, combine, compose_loss, LossTerms, LossValues, LossWeights, PatchDiscriminator, Perceptual,
    RandomConvPerceptual, Stage,
};
pub use optim::Optimizer;
pub use stages::{train_stage1, train_stage2, FreezeReport, Stage1Output, Stage2Output};
