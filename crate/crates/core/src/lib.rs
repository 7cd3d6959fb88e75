pub mod applicability;
pub mod error;
pub mod experiment;
pub mod gridworld;
pub mod nn;
pub mod policy;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
