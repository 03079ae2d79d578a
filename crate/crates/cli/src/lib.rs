//! Experiment harness behind the `otfuse` binary: fixture generation, fusion
//! runs, the solver/cost grid, sample-size and batch-norm sweeps, and CSV or
//! JSON result files.

pub mod cli;
pub mod commands;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod report;
pub mod settings;

pub use commands::{run, Outcome};
pub use error::{HarnessError, Result};
pub use experiments::{ExperimentResult, RunSnapshot, RunStatus};
