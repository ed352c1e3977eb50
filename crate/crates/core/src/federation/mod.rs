//! Federated simulation: partitioning, local updates, aggregation, rounds,
//! and weighted evaluation.

pub mod client;
pub mod diagnostics;
pub mod eval;
pub mod partition;
pub mod server;

pub use client::{
    client_stream, client_update, epoch_batches, ClientOutcome, ClientState, FederationConfig, StepRecord,
};
pub use diagnostics::{bound_rhs, divergence_diagnostic, dsm_bound_report, BoundReport, DivergenceRecord};
pub use eval::{accuracy, evaluate_weighted, weighted_mean, ClientEval, ClientSplit, DetectionMode, EvalMetrics};
pub use partition::{dirichlet_partition, largest_remainder, sample_dirichlet, size_weights, Partition};
pub use server::{
    aggregate, resolve_threads, run_rounds, sample_participants, ClientRoundSummary, EvalSchedule, RoundHistory,
    RoundRecord,
};
