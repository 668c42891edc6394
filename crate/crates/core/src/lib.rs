//! Flight trajectory representation learning.
//!
//! The pipeline turns raw trajectories into behavior-adaptive patches, encodes
//! them with a patch transformer, pretrains the encoder with motion-biased
//! masking and a reconstruction plus moving-direction objective, and evaluates
//! the learned representations on trajectory prediction, flight recognition
//! and anomaly detection.

pub mod checkpoint;
pub mod direction;
pub mod error;
pub mod experiment;
pub mod flightgen;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod pretrain;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../docs/tutorial.md")]
pub struct Tutorial;
