//! Time-synchronized state estimation for incompletely observed unbalanced
//! distribution feeders.
//!
//! The pipeline: feeder model ([`netmodel`]) → load scenarios ([`loadgen`]) →
//! three-phase power flow ([`powerflow`]) → simulated synchrophasor
//! measurements with a two-level error model ([`smdsim`]) → correlation-based
//! sensor placement ([`select`]) → MLP estimator of `E[x | z]` ([`dnn`]),
//! benchmarked against linear WLS ([`lse`]) by [`eval`].

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation; index
// loops mirror the matrix notation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cmat;
pub mod dnn;
pub mod eval;
pub mod loadgen;
pub mod lse;
pub mod netmodel;
pub mod par;
pub mod phase;
pub mod powerflow;
pub mod rng;
pub mod select;
pub mod smdsim;
#[doc(hidden)]
pub mod testing;

pub use phase::{Phase, PhaseMask};
