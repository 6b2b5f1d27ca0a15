//! Greedy Bayesian design of seismic station networks for moment-tensor
//! inversion.
//!
//! The inverse problem is linear-Gaussian, so the expected information gain
//! of any station subset has the closed form `½ logdet(HΣ_pr + I)`. Networks
//! are grown one station at a time by maximizing this gain under the current
//! posterior covariance.

pub mod design;
pub mod error;
pub mod evaluation;
pub mod forward;
pub mod inference;
pub mod scenario;

pub use error::{Error, ErrorCategory, Result};
