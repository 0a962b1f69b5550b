//! File formats, run configuration and the `vpn` command line on top of
//! [`vpn_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;

pub use error::{Error, Result};
