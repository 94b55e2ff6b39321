//! File formats and the end-to-end runs behind the command line.

mod commands;
mod report;
mod scenario;

pub use commands::{
    run_assign, run_flops, run_gradcheck, run_nms, run_simulate, AssignOptions, GradcheckOutcome,
    NmsOptions, SimulateOptions,
};
pub use report::{Report, REPORT_SCHEMA, REPORT_SCHEMA_VERSION};
pub use scenario::{
    load_scenario, parse_scenario, save_scenario, scenario_to_json, synthetic_pyramid, PredictionSource, Scenario, SyntheticSpec,
    SCENARIO_SCHEMA_VERSION,
};

use thiserror::Error;

use crate::assigner::AssignError;
use crate::decoder::DecoderError;
use crate::geometry::GeometryError;
use crate::losses::LossError;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The document does not parse against the schema.
    #[error("{path} (line {line}, column {column}): {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    /// The document parses but is inconsistent.
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}
