//! File formats, slide IO, tile fan-out, run reports and the `ihcq` CLI on
//! top of [`ihcq_core`].

pub use ihcq_core as core;

pub mod cli;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod pipeline;
pub mod pmap;
pub mod png;
pub mod report;
pub mod tables;

pub use error::{Error, Result};
