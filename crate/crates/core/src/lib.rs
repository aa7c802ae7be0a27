//! Budget-constrained active target discovery on partially observable
//! grids.
//!
//! A frozen diffusion prior ("permanent memory") is corrected online by a
//! lightweight h-transform network ("transient memory") fitted to the
//! observations gathered so far. Posterior ensembles drawn from the pair
//! drive an exploration/exploitation query policy under a strict
//! measurement budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: tasks, observations, queries and the success-rate metric
//! - [`schedule`]: discrete diffusion coefficients and forward/reverse steps
//! - [`nn`]: the tiny dense-network machinery shared by all models
//! - [`permanent`]: the frozen prior score model (analytic and trainable)
//! - [`transient`]: the h-transform correction and its trainer/scheduler
//! - [`posterior`]: conditional reverse-diffusion ensemble sampling
//! - [`reward`]: the online reward model
//! - [`policy`]: candidate scoring and query selection
//! - [`datagen`]: benchmark and corpus construction
//! - [`harness`]: configs, the episode loop, suites, reports and plots
//!
//! With the `parallel` feature (default) ensemble chains, candidate scoring
//! and suite episodes fan out over rayon; the sequential fallback produces
//! bit-identical results.

pub mod datagen;
pub mod domain;
pub mod error;
pub mod harness;
pub mod nn;
pub mod par;
pub mod permanent;
pub mod policy;
pub mod posterior;
pub mod reward;
pub mod schedule;
pub mod seed;
pub mod transient;

pub use error::{AtdError, Result};
