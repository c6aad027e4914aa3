//! Independently controllable factors on desk-scale gridworlds.
//!
//! A self-contained laboratory for selectivity-driven representation
//! learning: a minimal reverse-mode autodiff engine, deterministic gridworld
//! environments, the learned function stack (encoder, decoder, factor
//! generator, factor-conditioned policies, baseline, latent transition),
//! the selectivity objective with REINFORCE machinery, analysis tooling
//! (clustering, feature recovery, an exact mutual-information oracle), and a
//! latent-space planner.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod objective;
pub mod planner;
pub mod ppm;
pub mod trainer;

pub use error::{IcfError, Result};
