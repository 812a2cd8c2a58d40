//! Evaluation engine for out-of-distribution object detection.
//!
//! Fits and applies post-hoc per-object scores to exported detector outputs,
//! calibrates thresholds, and computes both ID-vs-OOD metrics (AUROC, FPR95)
//! and open-set metrics (P_U, R_U, AP_U, nOSE) against ground truth.

pub mod calibration;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod record_io;
pub mod scoring;
pub mod stratify;

pub use error::{Error, Result};
