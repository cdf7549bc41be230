//! Experiment orchestration: configuration, the outer loop and baselines, metrics,
//! reports, and the self-check suite.

pub mod check;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Method, Task};
pub use metrics::{env_diagnostics, metrics, purity, EnvDiagnostics, MetricRecord, TaskKind};
pub use pipeline::{build_replica, run_seed, Replica, SeedResult};
pub use report::{emit_report, load_report, run_experiment, Aggregate, Report};
