//! Offline and online evaluation metrics.

mod interleave;
mod ranking;

pub use interleave::*;
pub use ranking::*;

use serde::Serialize;

use crate::error::Result;

/// Writes any metric report as pretty JSON.
pub fn write_report<R: Serialize>(path: &std::path::Path, report: &R) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
