//! Run-log events: JSON-lines records of a pre-training run.
//!
//! One record per event. Training emits `pair_sampled`, `epoch_loss` and
//! `lower_step`; the driver may prepend a config echo and append
//! `checkpoint` records. Distribution and loss-matrix snapshots are flat
//! 25-value arrays in kind order (rows = first-view kind).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;

/// A training event worth one log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    /// A pair was sampled for a minibatch and scored.
    PairSampled {
        epoch: usize,
        step: usize,
        pair: [usize; 2],
        loss: f64,
    },
    /// Mean contrastive loss of one epoch.
    EpochLoss { epoch: usize, loss: f64 },
    /// One distribution update, with the loss matrix that drove it and the
    /// distribution after the projected step.
    LowerStep {
        step: usize,
        loss_matrix: Vec<f64>,
        dist: Vec<f64>,
    },
    /// A checkpoint file was written (path relative to the output dir).
    Checkpoint { epoch: usize, path: String },
}

/// Sink for training progress. `on_epoch_end` additionally exposes the
/// current parameters so a driver can write interval checkpoints.
pub trait TrainObserver {
    fn on_event(&mut self, event: &RunEvent) -> Result<()>;

    fn on_epoch_end(&mut self, _epoch: usize, _state: &ModelState) -> Result<()> {
        Ok(())
    }
}

/// Observer that discards everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {
    fn on_event(&mut self, _event: &RunEvent) -> Result<()> {
        Ok(())
    }
}

/// JSON-lines writer; every record is one line.
pub struct RunLogWriter<W: Write> {
    out: W,
}

impl<W: Write> RunLogWriter<W> {
    pub fn new(out: W) -> Self {
        RunLogWriter { out }
    }

    pub fn write_record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Malformed(format!("serializing log record: {e}")))?;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::Io {
                path: "<run log>".into(),
                source: e,
            })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::Io {
            path: "<run log>".into(),
            source: e,
        })
    }
}

/// Parse every line of a JSON-lines run log into loose JSON values.
pub fn read_log_values(path: impl AsRef<Path>) -> Result<Vec<serde_json::Value>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
            Error::Malformed(format!("{}:{}: bad JSON record: {e}", path.display(), lineno + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}
