//! Residual-aware distributionally robust extended Kalman filtering.
//!
//! `no_std` + `alloc`. File formats, configuration and the command line live
//! in the companion `drekf-sim` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ambiguity;
pub mod error;
pub mod filter;
pub mod mpc;
pub mod psd;
pub mod sdp;
pub mod systems;

pub use error::{Error, Result};
