use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One exposed result in a search session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickLogRecord {
    pub query_id: u64,
    pub query_text: String,
    pub doc_id: u64,
    pub doc_title: String,
    pub clicked: bool,
    /// Seconds on the page after the click; 0 when not clicked.
    pub dwell_time: f64,
}

/// A manual 0–4 relevance judgement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedLabelRecord {
    pub query_id: u64,
    pub query_text: String,
    pub doc_id: u64,
    pub doc_title: String,
    pub grade: u8,
}

impl ClickLogRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell_time >= 0.0) {
            return Err(Error::Input(format!(
                "negative dwell time {} for query {}",
                self.dwell_time, self.query_id
            )));
        }
        Ok(())
    }
}

impl GradedLabelRecord {
    pub fn validate(&self) -> Result<()> {
        if self.grade > 4 {
            return Err(Error::Input(format!(
                "grade {} outside 0..=4 for query {}",
                self.grade, self.query_id
            )));
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {}", path.display(), i + 1, e))
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_click_log(path: &Path) -> Result<Vec<ClickLogRecord>> {
    let records: Vec<ClickLogRecord> = read_jsonl(path)?;
    records.iter().try_for_each(ClickLogRecord::validate)?;
    Ok(records)
}

pub fn read_graded_labels(path: &Path) -> Result<Vec<GradedLabelRecord>> {
    let records: Vec<GradedLabelRecord> = read_jsonl(path)?;
    records.iter().try_for_each(GradedLabelRecord::validate)?;
    Ok(records)
}
