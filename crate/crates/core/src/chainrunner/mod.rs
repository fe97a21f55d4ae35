//! Scenario loading, stage ladder, trace comparison and artifacts.

mod compare;
mod metrics;
mod output;
mod runner;
mod scenario;

pub use compare::{compare_traces, DeviationReport, SignalDeviation, POWER_SIGNALS, SIGNALS};
pub use metrics::{compute_metrics, expectation_failures, in_settling, NodeVisit, StageMetrics};
pub use output::{report_json, write_interface_csv, write_outputs, write_trace_csv, TRACE_COLUMNS};
pub use runner::{run_ladder, run_stage, run_stage_via, single_report, LadderReport, StageRun};
pub use scenario::{load_scenario, ControllerSpec, Expectations, Scenario, Stage4Block, StageBlocks, Tolerances};

use thiserror::Error;

use crate::stagelink::LinkError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("scenario has no block for stage {0}")]
    MissingStageBlock(u8),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Link(#[from] LinkError),
}
