//! Calibration-aware generation toolkit.
//!
//! The crate scores reasoning traces step by step against retrieved evidence,
//! turns factuality scores into reliability labels, projects final answers onto
//! the reliable part of the reasoning, and evaluates the result with a
//! precision/recall/F1 factuality metric. Numeric kernels for the decision
//! theory behind thresholding and for RL baselines live alongside.
//!
//! Every external service (chat completion, evidence search, claim extraction,
//! claim verification) sits behind a trait in [`backends`], with deterministic
//! in-process mocks and a record/replay cassette so whole pipeline runs are
//! reproducible byte for byte.

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod calibration;
pub mod curation;
pub mod error;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod rewards;
pub mod text;
pub mod trace;
pub mod verification;

pub use error::{Error, Result};
pub use exec::Exec;
pub use trace::{
    parse_trace, serialize_trace, split_steps, AnnotatedTrace, AtomicClaim, DecodeStats, Query,
    ReasoningStep, ReliabilityLabel, TraceBody, TrainingTuple, Verdict,
};
