pub mod analysis;
pub mod data;
pub mod error;
pub mod merge;
pub mod nets;
pub mod optim;
pub mod parallel;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
