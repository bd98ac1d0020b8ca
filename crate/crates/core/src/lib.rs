//! Patient-trajectory world model.
//!
//! Learns patient dynamics from episodic tabular data with a VAE encoder and
//! an MDN-LSTM transition model, adds termination and outcome classifiers,
//! and exposes the result as a `reset`/`step` environment on which a DQN
//! agent can be trained and evaluated against recorded trajectories.

pub mod agent;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod heads;
pub mod learner;
pub mod pipeline;
pub mod state_model;
pub mod synth;
pub mod vae;

pub use error::{Error, Result};
