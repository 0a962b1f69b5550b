//! Pose-guided spatio-temporal attention for video action recognition.
//!
//! The crate is `no_std` (it needs `alloc`). Everything learnable runs on the
//! small reverse-mode engine in [`diff`]; file formats, configuration and the
//! command-line driver live in the companion `vpn` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod data;
pub mod diff;
pub mod embedding;
mod error;
pub mod model;
pub mod params;
pub mod posegraph;
pub mod train;

pub use error::{Error, Result};
