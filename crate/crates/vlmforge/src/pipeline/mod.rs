//! End-to-end dataset bootstrapping: synthesize a closed visual world, train
//! a generator and a filter on it, expand it into dense-caption and QA
//! records, validate the QA pairs by cross-model agreement, and report
//! statistics — plus the multi-task pre-training loop that consumes the
//! result.
//!
//! Everything here is deterministic given `(config, seed)`: work items draw
//! from keyed RNG streams and records are written in a fixed order, so a
//! rerun reproduces output files byte for byte and an interrupted run can
//! resume without changing them.

pub mod config;
pub mod jobs;
pub mod microworld;
pub mod oracle;
pub mod pretrain;
pub mod records;
pub mod stats;
pub mod train;
