pub mod autograd;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod humaneval;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
