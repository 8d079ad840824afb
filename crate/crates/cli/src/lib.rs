//! Command-line pipeline: synth, preprocess, train, evaluate, classify-map, ablate
//! and gradient-check.

pub mod commands;
pub mod config;
pub mod render;

use polsar_mcnn::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit status for an error: configuration problems are usage errors,
/// non-finite training is a numerical failure, everything else is a data error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}
