//! Cooperative training of depth-adaptive residual networks.
//!
//! The crate bundles everything needed to train a cohort of weight-shared,
//! depth-selectable networks and to pick a runtime depth under a cost budget:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference oracle,
//! - [`net`]: depth-parameterized residual networks and sub-network
//!   derivation,
//! - [`mask`]: differentiable binary layer selection (Gumbel top-k with a
//!   straight-through estimator),
//! - [`losses`]: distillation losses, including scale-weighted sub-network
//!   terms and the cooperative (two teammates plus leader) objective,
//! - [`trainer`]: the cooperative training loop,
//! - [`cost`]: analytic parameter/FLOP accounting and budget-driven depth
//!   selection,
//! - [`data`], [`config`], [`metrics`], [`checkpoint`]: the operational shell.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
