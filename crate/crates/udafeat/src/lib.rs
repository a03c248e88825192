//! File formats, dataset layout, reports and commands around `udafeat-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
