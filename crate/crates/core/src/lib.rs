//! Per-vehicle next-activity prediction for GPS-tracked hauling trucks.
//!
//! The pipeline runs trajectories through stay detection ([`geo`]), daily
//! activity sequences with context vectors ([`sequences`]), hidden-state
//! count selection ([`states`]), IOHMM estimation ([`iohmm`]) and
//! next-activity forecasting ([`predict`]). [`baselines`] and
//! [`evaluation`] score it against a Markov chain and a linear duration
//! model; [`synth`] generates fleets from known models and provides
//! brute-force oracles.

pub mod baselines;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fleet;
pub mod geo;
pub mod iohmm;
pub mod persist;
pub mod pipeline;
pub mod predict;
pub mod regression;
pub mod seeds;
pub mod sequences;
pub mod states;
pub mod synth;

pub use error::{Error, Result};
