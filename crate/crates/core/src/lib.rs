//! Temporal continual-learning evaluation harness for binary vulnerability
//! classifiers.

pub mod backend;
pub mod cli;
pub mod config;
pub mod conformance;
pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod stats;
pub mod strategies;
pub mod synth;
pub mod wire;

pub use error::{Error, Result};
