//! Constraint-projected learning for the 1-D viscous Burgers equation.
//!
//! A finite-volume core ([`fv`]), output-space projectors ([`projectors`]), a
//! stencil network ([`net`]) trained through the projection chain ([`trainer`]),
//! reference data ([`reference`]) and reliability metrics ([`diagnostics`]).

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fv;
pub mod grid;
pub mod losses;
pub mod net;
pub mod projectors;
pub mod reference;
pub mod trainer;

pub use config::RunConfig;
pub use diagnostics::{evaluate_one_step, evaluate_rollout, EvalConfig, MetricsRecord, RolloutEvaluation, Stepper};
pub use error::{CplError, Result};
pub use fv::Scheme;
pub use grid::{FaceStates, GridState, Mesh1D};
pub use losses::{LossBreakdown, LossWeights};
pub use net::{ArchSpec, Checkpoint, PredictorParams};
pub use reference::{Dataset, InitialCondition, ScenarioSpec};
pub use trainer::{cpl_project_output, default_chain, run_training, training_chain, ChainStep, TrainConfig, TrainReport};
