//! Positive-unlabeled learning with uncertainty-aware pseudo-labeling.
//!
//! The crate trains a small deep ensemble with a non-negative PU risk, ranks
//! unlabeled samples by epistemic uncertainty, moves the most certain ones
//! into a soft-labeled set, moves doubtful pseudo-labels back, and repeats.
//!
//! Modules, bottom up:
//!
//! * [`dataset`]: loading (IDX, CSV, synthetic Gaussians), PU-ification,
//!   standardization and validation splits.
//! * [`network`]: MLP with exact backpropagation, Adam, parameter snapshots.
//! * [`puloss`]: uPU / nnPU risks and the combined pseudo-label objective.
//! * [`uncertainty`]: ensembles, MC-dropout and the entropy decomposition.
//! * [`metrics`]: accuracy, PU-AUC, ECE, NLL.
//! * [`engine`]: the pseudo-labeling loop and prior grid search.
//! * [`experiment`]: run configuration, multi-seed runs, sweeps, artifacts.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod puloss;
pub mod rng;
pub mod runlog;
pub mod uncertainty;

pub use error::{PuError, Result};
