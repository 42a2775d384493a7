//! Neural approximation of a model predictive controller.
//!
//! A kinematic bicycle ([`plant`]) is regulated to the origin by a
//! single-shooting MPC ([`mpc`]). A `4-512-512-2` network ([`nn`]) learns the
//! controller from expert data, either once by behavioral cloning or through
//! DAgger iterations that label the network's own visited states
//! ([`imitation`]). [`eval`] compares the network against the expert in
//! closed loop with an RMSE over both control channels.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod imitation;
pub mod mpc;
pub mod nn;
pub mod plant;
pub mod policy;
pub mod seed;

pub use data::{Dataset, LabeledSample, Provenance};
pub use mpc::{ControlSequence, MpcConfig};
pub use nn::{MlpParams, TrainConfig};
pub use plant::{Bounds, Control, Regime, RegimeMix, State, Trajectory};
