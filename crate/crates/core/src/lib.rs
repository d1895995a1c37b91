//! Laplace-GGN and natural-gradient Gaussian inference for small neural networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod explain;
pub mod gp;
pub mod likelihood;
pub mod laplace;
pub mod linalg;
pub mod marglik;
pub mod ngvi;
pub mod nn;
pub mod predictive;
pub mod train;

pub use error::{Error, Result};
