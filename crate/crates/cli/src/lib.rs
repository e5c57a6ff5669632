//! Library half of the batch harness: run configuration, the named
//! variant registry, sweep execution, and report emission. The `qattn`
//! binary is a thin argument-parsing shell over these.

pub mod config;
pub mod report;
pub mod runner;
pub mod variants;

pub use config::{InputSource, OutputFormat, RunConfig};
pub use report::{Report, ReportRow};
pub use runner::{execute_ablate, execute_run, AppError};

/// Exit codes: 0 ok, 1 config error, 2 runtime error.
pub fn exit_code(err: &AppError) -> i32 {
    match err {
        AppError::Config(_) => 1,
        AppError::Runtime(_) => 2,
    }
}
