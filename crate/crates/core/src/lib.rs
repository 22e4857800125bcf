//! Polymatrix competitive gradient descent and supporting tooling.

// `!(x >= 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod game;
pub mod linalg;
pub mod marl;
pub mod optimizers;

pub use error::{Error, Result};
