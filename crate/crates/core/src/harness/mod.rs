//! Experiment runner: configuration, training, checkpoints, evaluation and the CLI.

pub mod bleu;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod train;

pub use bleu::{bleu, BleuReport};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Preset};
pub use eval::{corpus_bleu, evaluate, EvalReport};
pub use pipeline::{compare_with_direct_transfer, run_preliminary_study, Dataset, StudyMatrix};
pub use train::{train, MetricRecord, TaskPlan, TrainOutcome, TrainRun};
