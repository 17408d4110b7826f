//! Append-only CSV training log.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub wallclock_s: f64,
    /// Loss on the fixed held-out set; empty when there is none.
    pub heldout_loss: Option<f64>,
    pub config_hash: String,
}

pub struct MetricsWriter {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            last_step: None,
        })
    }

    /// Write one row and flush. Steps must strictly increase.
    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::Usage(format!(
                "metrics step {} does not follow {}",
                row.step,
                self.last_step.unwrap()
            )));
        }
        self.writer
            .serialize(row)
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}
