//! Latent world-model driving agent.
pub mod agent;
pub mod encoder;
pub mod envsim;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod replay;
pub mod rssm;

pub use error::{Error, Result};
