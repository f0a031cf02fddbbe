//! Long-tailed classification in two stages.
//!
//! Stage one trains an MLP encoder and linear classifier with a mean-teacher
//! consistency objective across strongly and weakly perturbed views
//! ([`rrl`]). Stage two re-initialises the classifier and alternates between
//! fitting it on class-balanced virtual features drawn from per-class
//! Gaussians and fine-tuning the encoder under a Mahalanobis
//! attraction/repulsion regulariser ([`icc`]).
//!
//! Everything runs on a small reverse-mode autodiff core ([`diffcore`]) in
//! `f64`, single-threaded and deterministic per seed.

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod harness;
pub mod icc;
pub mod linalg;
pub mod metrics;
pub mod rrl;
pub mod seed;

pub use error::{Error, Result};
