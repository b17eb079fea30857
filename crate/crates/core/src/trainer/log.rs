//! Structured training log: line-delimited JSON records, one per step and one
//! per epoch, preceded by a meta record carrying the schema version and the
//! resolved config fingerprint.
//!
//! Wall times are zeroed when `SOURCE_DATE_EPOCH` is set so reruns produce
//! byte-identical logs.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cross_entropy: f64,
    pub align: f64,
    pub uniform: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_auroc: f64,
    pub val_auroc: f64,
    pub mean_total_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub train_manifest: String,
    pub val_manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Meta(MetaRecord),
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub struct LogWriter {
    file: std::fs::File,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            file: std::fs::File::create(path)?,
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

/// Reads a log back into records (used by the report command and tests).
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Milliseconds elapsed, or zero in reproducible-output mode.
pub fn wall_ms_since(start: std::time::Instant) -> u64 {
    if std::env::var_os("SOURCE_DATE_EPOCH").is_some() {
        0
    } else {
        start.elapsed().as_millis() as u64
    }
}
