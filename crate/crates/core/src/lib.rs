//! Selfish-mining simulation, undetectable labeling strategies, detection tests
//! and exact reward analysis for two-player longest-chain games.

pub mod analysis;
pub mod config;
pub mod detect;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod markov;
pub mod model;
#[cfg(test)]
mod properties;
pub mod repro;
pub mod strategies;
pub mod usm;

pub use error::{Error, Result};
