pub mod attribution;
pub mod corpus;
mod error;
pub mod fixtures;
pub mod interventions;
pub mod lm;
pub mod probes;
pub mod sae;

pub use error::{Error, Result};
