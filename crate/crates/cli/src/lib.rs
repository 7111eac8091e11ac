//! File formats, threaded execution and the `pdt` command surface over
//! `pdt-core`.

pub mod args;
pub mod artifact_io;
pub mod commands;
pub mod error;
pub mod inputs;
pub mod output;
pub mod parallel;
pub mod trace_io;

pub use error::{CliError, Result};
