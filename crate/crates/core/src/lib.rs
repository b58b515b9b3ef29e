//! Low-rank variational Bayesian neural networks.
//!
//! Weights are either ordinary tensors, full mean-field posteriors, or
//! products `W = A B^T` of factor posteriors. Training maximizes the ELBO by
//! reparameterized sampling on a define-by-run tape. The [`bounds`] module
//! evaluates the accompanying generalization and approximation bounds.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bounds;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod init;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
