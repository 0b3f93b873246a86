//! Order-enhanced contrastive learning on ordinal labels.
//!
//! The crate provides a small reverse-mode differentiation engine, an MLP
//! encoder with age and identity heads, learnable per-label proxies, the
//! order / proxy-matching / identity objectives built on them, a seeded
//! synthetic data generator, and the training and evaluation pipelines for
//! age estimation and age-invariant identity recognition.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod proxy;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Gradients, Tape, Var, EPS_NORM};
pub use error::{Error, Result};
pub use tensor::Tensor;
