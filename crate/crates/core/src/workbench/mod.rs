//! Experiment plumbing: configuration, synthetic data, shifts, CSV I/O,
//! plot exports, end-to-end runs and the 2-d toy sweep.

pub mod config;
pub mod csv_io;
pub mod data;
pub mod experiment;
pub mod export;
pub mod gradsuite;
pub mod shift;
pub mod toy;

pub use config::{ExperimentConfig, Overrides};
pub use data::{generate_dataset, DatasetBundle, GeneratorSpec, LabeledSet, OutKind, SplitSizes};
pub use experiment::{run_experiment, run_experiment_file, write_artifacts, ExperimentOutcome, Metrics};
pub use shift::{covariate_shift, ShiftKind, ShiftSpec};
