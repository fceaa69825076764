//! Adaptive multi-level learning-rate optimization, with the experiment
//! harness and verification suites used to exercise it.

pub mod data;
pub mod error;
pub mod harness;
pub mod lrtree;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
