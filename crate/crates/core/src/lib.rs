pub mod bench;
pub mod cli;
pub mod coreset;
pub mod data_io;
pub mod error;
pub mod gaussian;
pub mod models;
pub mod pfr;
pub mod predictive;
pub mod seed;

pub use error::{Error, Result};
