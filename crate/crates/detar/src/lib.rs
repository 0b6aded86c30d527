//! Files, evaluation runner and command line around `detar-core`.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crsp;
pub mod error;
pub mod manifest;
pub mod pool;
pub mod runner;

pub use error::{Error, Result};
