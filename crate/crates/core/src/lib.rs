//! Desk-scale multi-distribution ranking model.
//!
//! The crate implements a tokenized multi-scenario / multi-task ranking
//! architecture end to end: a dense `f64` tensor engine with reverse-mode
//! differentiation ([`tape`]), parameter storage with Adagrad/RMSProp rules
//! and a binary archive format ([`params`]), unified feature/scenario/task
//! tokenization ([`schema`], [`tokenize`]), the token-interaction model and
//! its baselines ([`model`]), a synthetic multi-scenario dataset generator
//! ([`data`]), and training plus grouped-AUC evaluation and analysis tooling
//! ([`metrics`], [`train`], [`analysis`]).

pub mod analysis;
pub mod data;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod schema;
pub mod tape;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
