//! Adaptive padding against website fingerprinting.
//!
//! Traces are parsed and synthesized in [`traces`], inter-arrival
//! histograms live in [`histograms`] and are estimated by [`fitting`],
//! [`padding`] holds the per-endpoint state machines, [`simulator`] replays
//! traces through a padded link, [`baselines`] implements constant-rate
//! defenses for comparison, and [`evaluation`] scores them all with a k-NN
//! attack.

// `!(x > 0.0)` deliberately rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod evaluation;
pub mod fitting;
pub mod histograms;
pub mod padding;
pub mod simulator;
pub mod traces;
