//! Dynamic watermarking for finite Markov decision processes.
//!
//! A controller mixes a secret random policy into its actions and runs a
//! CUSUM test on the reported observations to detect feedback attacks.

pub mod attack;
pub mod bounds;
pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod rng;
pub mod sensornet;
pub mod watermark;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
