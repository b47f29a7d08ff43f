//! A small laboratory for group-relative policy optimization.
//!
//! The crate pairs a tabular autoregressive policy ([`toy_lm`]) with a
//! synthetic multiple-choice task family ([`taskgen`]), a rule-based reward
//! stack ([`rewards`]), the GRPO / Dr.GRPO training engine ([`grpo`]),
//! evaluation metrics ([`metrics`]) and an experiment harness ([`harness`]).
//!
//! Everything runs in 64-bit floating point with closed-form gradients, so the
//! objective can be checked against finite differences and the expected reward
//! against exhaustive enumeration.

pub mod error;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod rewards;
pub mod rng;
pub mod taskgen;
pub mod toy_lm;

pub use error::{Error, Result};
