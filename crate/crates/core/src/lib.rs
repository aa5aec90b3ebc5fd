//! Scalable Gaussian-process regression.
//!
//! Exact GP, the inducing-point family (SoR, DTC, FITC, PIC, VFE), stochastic
//! variational GP, and local-expert aggregation (PoE, GPoE, BCM, RBCM), with a
//! benchmark harness around them.

// NaN-rejecting guards are written as negated comparisons on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregation;
pub mod data;
pub mod error;
pub mod gp_full;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod optimize;
pub mod par;
pub mod predictive;
pub mod sparse;
pub mod svgp;

pub use error::{GpError, Result};
pub use kernel::Hyperparameters;
pub use predictive::{Flavor, PredictiveDistribution};
