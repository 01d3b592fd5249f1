//! Model assembly, training, evaluation and gradient checks.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use config::{EvalConfig, LossConfig, PathsConfig, RunConfig, TrainConfig};
pub use eval::{evaluate_scenes, mean_report, run_eval_sweep, sweep_to_csv, write_sweep_csv, SweepRow};
pub use model::{FusionMode, FusionModel, FusionOutput};
pub use train::{run_training, EpochLog, TrainOutcome};
pub use gradcheck::{run_gradcheck, GradcheckReport};
