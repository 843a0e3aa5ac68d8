//! Experiment harness behind the `vlaguard` binary.

pub mod commands;
pub mod config;
pub mod experiment;

use vlaguard_core::Error;

/// Process exit code for a failed command.
///
/// 2: bad input, config or path; 3: a statistical precondition failed
/// (too little calibration data, degenerate or singular statistics);
/// 4: a file could not be parsed.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InsufficientCalibration { .. }
                | Error::Degenerate(_)
                | Error::SingularCovariance { .. }
                | Error::UndefinedCorrelation(_)
                | Error::TrainingDiverged { .. } => 3,
                Error::Json(_) => 4,
                Error::InvalidInput(msg) if msg.starts_with("line ") => 4,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<toml::de::Error>() {
            return 4;
        }
    }
    2
}
