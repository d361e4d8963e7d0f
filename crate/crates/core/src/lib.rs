//! Fuzzy regression-discontinuity toolkit for evaluating early-warning
//! interventions from course e-assessment logs.
//!
//! The pipeline runs from raw submission, online-test and exam logs
//! ([`cohort`]) through a logistic pass-probability model ([`pass_model`])
//! and the cutoff assignment rule ([`treatment`]) to local two-stage least
//! squares estimates of the effect of a warning ([`rdd`]). Design checks
//! live in [`density`] (McCrary sorting test) and [`bandwidth`]
//! (Imbens–Kalyanaraman selector). [`sim`] generates synthetic cohorts with
//! a known effect.

pub mod bandwidth;
pub mod cohort;
pub mod density;
pub mod error;
pub mod estimation;
pub mod pass_model;
pub mod rdd;
pub mod sim;
pub mod stats;
pub mod treatment;

pub use error::{Error, ErrorClass, Result};
