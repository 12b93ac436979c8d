//! Three-phase unbalanced distribution feeder analysis: power flow, analytic
//! voltage-unbalance sensitivities and a linear-programming phase balancer.

// Negated comparisons are used on purpose so that NaN fails every guard.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balancer;
pub mod feeder;
pub mod harness;
pub mod lp;
pub mod metrics;
pub mod phase;
pub mod powerflow;
pub mod sensitivity;
pub mod unbalance_sensitivity;

pub use feeder::{load_feeder, FeederError, FeederModel};
pub use metrics::Metric;
pub use powerflow::{solve, InjectionVector, SolveOptions, VoltageState};
