pub mod baselines;
pub mod basis;
pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod desc;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod synthgen;

pub use error::{Error, Result};
