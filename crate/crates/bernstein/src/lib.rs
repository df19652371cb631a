//! Experiment runner for `bernstein-core`: JSON configs with content
//! fingerprints, artifact formats, parallel ensembles, the verification
//! suite and the command implementations behind the `bernstein` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod hypothesis;
pub mod parallel;
pub mod triples;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use verify::{Check, Verdict, VerificationReport};
