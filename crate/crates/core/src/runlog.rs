//! Per-epoch and per-iteration run records.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};

/// One epoch of inner training, averaged over ensemble members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_pu: f64,
    /// Absent while the pseudo-labeled set is empty.
    pub loss_pl: Option<f64>,
    /// Fraction of minibatches where the non-negative correction was active.
    pub clamped_fraction: f64,
    pub learning_rate: f64,
    pub val_score: f64,
    /// Validation ECE, when validation ground truth exists.
    pub val_ece: Option<f64>,
}

/// Outcome of one pseudo-labeling iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub iteration: usize,
    /// Candidates passing rank and threshold, before class balancing.
    pub n_selected: usize,
    pub n_newly_labeled: usize,
    pub n_newly_positive: usize,
    pub n_newly_negative: usize,
    pub n_unlabeled_back: usize,
    /// Validation score of the end-of-iteration weights (used for selection).
    pub val_score_end: f64,
    /// Best validation score within this iteration.
    pub val_score_iteration_best: f64,
    /// Score of θ* after this iteration.
    pub val_score_best: f64,
    /// Accuracy of the newly assigned labels against hidden truth.
    pub pl_accuracy_new: Option<f64>,
    /// Accuracy of every current pseudo-label against hidden truth.
    pub pl_accuracy_all: Option<f64>,
    /// NLL of the stored pseudo-labels against hidden truth.
    pub pl_nll: Option<f64>,
    pub size_p: usize,
    pub size_u: usize,
    pub size_l: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterationOutcome>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    pub const EPOCH_HEADER: &'static str =
        "iteration,epoch,loss_total,loss_pu,loss_pl,clamped_fraction,learning_rate,val_score,val_ece";

    /// Epoch table as CSV. Floats use Rust's shortest round-trip formatting,
    /// so identical runs give identical bytes.
    pub fn epoch_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::EPOCH_HEADER);
        out.push('\n');
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.iteration,
                e.epoch,
                e.loss_total,
                e.loss_pu,
                opt(e.loss_pl),
                e.clamped_fraction,
                e.learning_rate,
                e.val_score,
                opt(e.val_ece)
            )
            .expect("writing to a String");
        }
        out
    }

    /// Iteration outcomes as JSON lines.
    pub fn iterations_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(it).expect("outcome serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_epoch_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.epoch_csv().as_bytes())
    }

    pub fn write_iterations_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.iterations_jsonl().as_bytes())
    }

    /// Total loss of every epoch, in order.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss_total).collect()
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| PuError::io(path, e))?;
    f.write_all(bytes).map_err(|e| PuError::io(path, e))
}
