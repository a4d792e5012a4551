//! Batch commands behind the `proxitr` binary: simulate, fit, evaluate and
//! benchmark, driven by one TOML configuration.

mod commands;
mod config;
mod records;

pub use commands::{
    cmd_benchmark, cmd_evaluate, cmd_fit, cmd_simulate, quantile_sorted, summarize, train, BenchmarkOutcome,
    BridgeDiagnostic, CoverageRow, Manifest, ModelFile, SummaryRow,
};
pub use config::{
    BenchmarkConfig, EvaluateConfig, FitConfig, LearnerChoice, Overrides, RunConfig, SimulateConfig,
};
pub use records::{append_records, read_records, NamedValue, ResultRecord};
