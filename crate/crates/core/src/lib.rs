pub mod captioner;
pub mod costs;
pub mod dataio;
pub mod error;
pub mod json;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod wsor;
pub mod wsrr;

pub use error::{Error, Result};
