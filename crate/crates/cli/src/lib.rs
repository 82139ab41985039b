//! Experiment runner behind the `hinf` binary: configuration, data files,
//! training and evaluation commands, plot-data export.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

use hybrid_inference::Error;

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric
/// divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Shape { .. } | Error::State(_) => 3,
        Error::Numeric { .. } | Error::Divergence { .. } | Error::Factorization(_) | Error::Tuning(_) => 4,
    }
}
