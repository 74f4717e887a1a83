//! Run configuration, checkpoints, optimisation and the train/eval/analyze commands.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod optim;
pub mod plot;
pub mod selftest;
pub mod train;

pub use analyze::{cmd_analyze, AnalyzedImage, ImageSelection};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{DatasetConfig, EvalConfig, OptimConfig, Precision, RunConfig, OUTPUT_ROOT_ENV};
pub use dataset::{Split, SplitName};
pub use evaluate::{cmd_eval, evaluate, load_detector, EvalReport, OraclePredictor, Predictor};
pub use optim::Adam;
pub use plot::cmd_plot;
pub use selftest::{run_selftest, InvariantResult, SelftestOptions};
pub use train::{read_step_losses, train, TrainOptions, TrainSummary, LOG_SCHEMA_VERSION};
