//! Neural cellular automata for image segmentation: the update rule, mini-unroll
//! training with a persistent state pool, synthetic and pet datasets, and the
//! analysis experiments.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod render;
pub mod runconfig;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use config::{ArchConfig, FirstLayer};
pub use error::{CoreError, Result};
pub use model::{init_state, state_rgb, Automaton, StepDraws};
pub use runconfig::RunConfig;
pub use params::{init_params, param_count, zero_params, RuleParams, UpdateRuleParams};

pub use cellseg_tensor::{NormKind, Purpose, RngStream, Scalar, Tensor};

pub type Automaton32 = Automaton<f32>;
pub type Automaton64 = Automaton<f64>;
pub type Params32 = UpdateRuleParams<f32>;
pub type Params64 = UpdateRuleParams<f64>;
