pub mod activation;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod index;
pub mod lexical;
pub mod metrics;
pub mod pipeline;
pub mod posting;
pub mod retrieval;
pub mod sae;
pub mod strategy;
pub mod synth;
pub mod timing;

pub use error::{Error, Result};
