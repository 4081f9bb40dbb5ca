//! Minimal neural network toolkit: flat parameter vectors, hand-derived
//! backward passes, and GEMM-backed convolutions.

pub mod adam;
pub mod layers;
pub mod network;
pub mod scalar;

pub use adam::{clip_grad_norm, ema_update, Adam, AdamConfig};
pub use network::{NetConfig, NetInput, Network, ParamEntry};
pub use scalar::Real;
