//! Finite-size gradient transport probe.
//!
//! Applies a thresholded cascade probe to saved gradient or update field
//! snapshots, fits cross-scale exponents of cascade size, duration and
//! transport efficiency, and compares real fields against matched null
//! controls.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod cascade;
pub mod error;
pub mod graph;
pub mod nulls;
pub mod oracle;
pub mod pipeline;
pub mod quantile;
pub mod rng;
pub mod scaling;
pub mod snapshot;

pub use error::{Error, Result};
