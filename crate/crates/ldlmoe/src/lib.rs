//! File formats and the `ldlmoe` command line on top of [`ldlmoe_core`].

pub mod cli;
pub mod error;
pub mod io;

pub use error::{AppError, AppResult};
