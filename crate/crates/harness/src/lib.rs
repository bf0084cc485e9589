//! Command-line harness for zsq-core: configuration, seeded runs, and CSV and
//! manifest output.

pub mod cli;
pub mod config;
pub mod csv_out;
pub mod error;
pub mod output;

pub use error::{HarnessError, Result};
