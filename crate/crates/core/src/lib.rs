//! Sparse factor analysis of binary student responses with point-estimate
//! and amortized variational training.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod mle;
pub mod model;
pub mod optim;
pub mod postprocess;
pub mod rng;
pub mod synth;
pub mod trace;
pub mod vi;

pub use error::{Error, Result};
