//! End-to-end orchestration: configuration, row execution and reporting.

pub mod config;
pub mod report;
pub mod run;

pub use config::{PipelineConfig, ResolvedConfig, UnknownRanking};
pub use report::{
    emit_tables, metric_correlations, CorrelationMatrix, EvalReport, ReportRow, TableFormat,
};
pub use run::{run_pipeline, sha256_file, write_outputs, PipelineOutput};
