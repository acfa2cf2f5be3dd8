//! Expert-level mixed-precision quantization for mixture-of-experts models.

pub mod allocation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod quantizer;
pub mod ranking;
pub mod seeding;
pub mod synthetic;

pub use error::{Error, Result};
