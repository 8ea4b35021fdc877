//! Sparse-feature circuit analysis of garden-path processing in small transformer language models.

pub mod attribution;
pub mod circuits;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod run;
pub mod sae;
pub mod stimuli;

pub use error::{Error, Result};
