//! Smart-contract vulnerability detection: Solidity preprocessing, file
//! formats, configuration and the experiment harness around `stip-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod harness;
pub mod preprocess;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
