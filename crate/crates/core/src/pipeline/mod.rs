//! Experiment configuration, training, checkpoints and the analysis harness.

pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, TrainingMetadata};
pub use config::{AblationConfig, AdamConfig, DataPaths, ExperimentConfig, Features, FusionKind, ModelKind};
pub use harness::{ablate_length, ablate_size, dump_attention, run_matrix, run_matrix_on, MatrixReport, MatrixRow};
pub use model::{Model, ModelSpec, Prediction};
pub use optim::Adam;
pub use train::{evaluate, predict, train, Dataset, EpochLog, TrainOutcome};
