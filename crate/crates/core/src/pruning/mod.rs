//! Module replacement with annealed blending, and channel narrowing.

pub mod annealed;
pub mod channel;
pub mod linear_attention;
pub mod plan;
pub mod replacements;
pub mod schedule;

pub use annealed::{blend, AnnealedPair, Slot, SlotControl, SlotState};
pub use channel::{channel_prune, inherit_weights};
pub use linear_attention::{feature_map, linear_attention};
pub use plan::{apply_plan, finalize, incomplete_pairs, PruningPlan};
pub use schedule::{sigma, AnnealingSchedule};
