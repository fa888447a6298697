pub mod artifacts;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod restorer;
pub mod rng;
pub mod schedule;
pub mod token_model;
pub mod vqae;

pub use error::{Error, Result};
