//! File formats, configuration loading and the command-line front end for
//! `daevi-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod pnm;

pub use error::{Error, Result};
