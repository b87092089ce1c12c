//! File formats, checkpoints, configuration and the command-line pipeline
//! around [`mmssl_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod log;
pub mod report;
pub mod run;

pub use error::{Error, ExitKind, Result};
