use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::losses::LossValues;

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: u8,
    /// `stage1`, `channel` or `anneal`.
    pub phase: String,
    pub step: u64,
    pub sigma: f64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Append-only JSON-lines log.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &TrainRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("training log", e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
