//! Q-exponential process priors on function spaces.
//!
//! The crate provides the multivariate q-exponential distribution
//! ([`qed`]), function-space priors built on it together with Gaussian and
//! Besov baselines ([`processes`]), forward models ([`models`]), posterior
//! inference by MAP and elliptical slice sampling ([`inference`]) and the
//! experiment drivers behind the `qep` command-line tool ([`harness`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod inference;
pub mod models;
pub mod kernels;
pub mod processes;
pub mod qed;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
