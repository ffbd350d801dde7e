//! Command-line front end for the pre-training pipeline, plus the synthetic
//! desk-scale corpora used by the end-to-end checks.

pub mod app;
pub mod desk;
