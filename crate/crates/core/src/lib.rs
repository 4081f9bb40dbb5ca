//! Compositional diffusion planning for offline control.
//!
//! A planner denoiser models joint state-action sub-trajectories, a dynamics
//! denoiser models states given actions, and the two are interleaved at
//! every reverse step of the sampler. Sampled candidates are scored and
//! filtered against a cost budget by the ranker.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod env;
pub mod error;
pub mod harness;
pub mod hash;
pub mod ranker;
pub mod sampler;
pub mod nn;
pub mod schedule;

pub use error::{Error, Result};
