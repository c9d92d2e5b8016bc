//! Per-epoch metrics as append-only JSONL, one object per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossBreakdown;

pub const METRICS_SCHEMA: u32 = 1;

/// Accuracy per network per factor; keys are formatted factors ("0.2").
pub type AccuracyMap = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub epoch: usize,
    pub lr: f64,
    /// Loss components averaged over the epoch's steps.
    pub loss: LossBreakdown,
    pub acc: AccuracyMap,
    /// Wall time of the epoch; excluded from determinism comparisons.
    pub wall_time_ms: f64,
}

pub fn factor_key(s: f64) -> String {
    format!("{s:.2}")
}

/// Appends one JSON object per record.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<MetricsWriter> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

impl MetricsRecord {
    /// Copy with volatile fields cleared, for run-to-run comparisons.
    pub fn stripped(&self) -> MetricsRecord {
        let mut r = self.clone();
        r.wall_time_ms = 0.0;
        r
    }
}
