//! Mini-unroll training over a persistent state pool, and the full-unroll baseline.

pub mod metrics;
pub mod pool;
pub mod schedule;
pub mod trainer;

pub use pool::{pool_resample, PoolEntry};
pub use schedule::{per_unroll_reset_prob, UnrollMode, UnrollSchedule};
pub use trainer::{
    draw_batch, unrolled_loss, StepOutcome, StepReport, TrainConfig, TrainSummary, Trainer, Unrolled,
};
