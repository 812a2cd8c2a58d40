//! Evaluation metrics: ID-vs-OOD separation and open-set detection.

pub mod ood;
pub mod osod;
