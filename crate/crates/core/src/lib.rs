//! Workflow-integrity monitoring from passive electromagnetic traces.
//!
//! An agent host runs a sequence of skills. Two software-defined receivers,
//! one tuned near the CPU emission band and one near the memory band, record
//! the host's unintended emanations. From those captures this crate recovers
//! which skill ran in each record, flags records that carry an injected
//! payload, and compares the recovered skill sequence against a policy.
//!
//! Data flows through the modules in this order:
//!
//! - [`emcorpus`] renders synthetic dual-receiver IQ records with event and
//!   temperature sidecars, and reads and writes them on disk.
//! - [`windowing`] cuts coarse skill envelopes into overlapping fine windows.
//! - [`features`] turns each window into a fixed 320-value vector.
//! - [`drift`] normalizes per cycle, removes temperature trends and selects
//!   features, fitted on training folds only.
//! - [`forest`] is the balanced random forest used by both stages.
//! - [`detector`] pools window posteriors into record decisions.
//! - [`verify`] scores the recovered sequence by weighted edit distance.
//! - [`survey`] picks receiver carriers from a power sweep.
//! - [`evalharness`] holds fold plans, metrics and diagnostics.
//!
//! [`pipeline`] ties these together for the command-line tool, [`config`]
//! describes a whole experiment and [`presets`] ships ready-made corpora.

pub mod config;
pub mod detector;
pub mod drift;
pub mod emcorpus;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod forest;
pub mod linalg;
pub mod pipeline;
pub mod presets;
pub mod survey;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
