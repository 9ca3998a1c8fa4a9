//! Filesystem side of the posevote toolkit: raster, mesh and JSON formats,
//! desk-scale synthetic datasets and the `posevote` command line.
//!
//! All numerics live in [`posevote_core`].

pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
