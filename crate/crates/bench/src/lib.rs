//! Experiment harness for text2freq: synthetic corpora, Stage-1 and Stage-2
//! training, the three-method comparison and the frequency ablation.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{BenchError, Result};
pub use report::ExperimentReport;
