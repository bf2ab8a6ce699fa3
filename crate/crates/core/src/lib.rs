//! Post-hoc calibration of probabilistic classifiers on a shifted target domain
//! without target labels.
//!
//! Calibrators (Platt, temperature, isotonic) are fit on labeled source data by
//! minimizing a calibration loss reweighted with density ratios
//! `target(x) / source(x)`. Because the weighted source loss is an unbiased
//! estimate of the target loss, the fitted calibrator targets the shifted domain.
//!
//! - [`dataset`]: labeled data, synthetic shift generators, CSV IO
//! - [`learner`]: softmax regression and small MLPs trained by weighted NLL
//! - [`calibration`]: weighted Platt, temperature, and isotonic calibrators
//! - [`importance`]: density ratios, weight corrections, divergence diagnostics
//! - [`metrics`]: ECE, reliability bins, accuracy, NLL
//! - [`harness`]: the source/target evaluation protocol and parameter sweeps
//! - [`config`]: JSON configuration documents for the command-line tool

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod importance;
pub mod learner;
pub mod metrics;
mod rng;

pub use calibration::{Calibrator, CalibratorKind};
pub use dataset::{Domain, GaussianShiftConfig, LabelRule, LabeledDataset, MixtureShiftConfig};
pub use error::{Error, Result};
pub use importance::{ImportanceWeights, Provenance, RatioDiagnostics, WeightCorrection};
pub use learner::{Architecture, LearnerConfig, ProbabilisticModel};
pub use metrics::{EvaluationReport, Method, ReliabilityBins};
