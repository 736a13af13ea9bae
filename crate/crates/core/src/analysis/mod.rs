//! Metrics and the experiment battery.

pub mod adversarial;
pub mod evolution;
pub mod experiments;
pub mod iou;
pub mod regime;
pub mod trace;

pub use adversarial::{adversarial_perturb, AdversarialConfig, AdversarialResult};
pub use evolution::{
    run_evolution, run_image_change, run_protocol, run_shift, Evolution, EvolutionConfig, Protocol, StepRecord,
};
pub use experiments::{
    change_stats, run_experiment, train_and_eval, ChangeStat, ExperimentInputs, ExperimentOptions, ExperimentReport,
    VariantResult, EXPERIMENTS,
};
pub use iou::{iou, IouCounts, IouReport};
pub use regime::{regime_trace, RegimeChange, RegimeConfig};
pub use trace::{l1_per_dim, write_series_csv, TraceSeries};
