//! Pattern-learning predictive control (PLP) for linear discrete-time Markov
//! jump systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`chain`], [`network`], [`system`]: the jump-linear plant, its mode chain,
//!   the switching network topologies and a seeded simulator.
//! - [`mode_id`]: hidden-mode identification by consistent-set narrowing and an
//!   empirical transition matrix.
//! - [`pattern`]: closed-form pattern-occurrence statistics (expected minimum
//!   occurrence time, first-occurrence probabilities) built from fair gambling
//!   teams, plus a Monte Carlo oracle.
//! - [`sls`]: finite-horizon System Level Synthesis (model-based, robust over
//!   several topologies, data-driven from Hankel matrices) and the runtime
//!   controller.
//! - [`plp`]: the controller architecture tying the above together with a
//!   per-mode memory table, and the two comparison baselines.

// `!(x <= y)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod error;
pub mod linalg;
pub mod mode_id;
pub mod network;
pub mod pattern;
pub mod plp;
pub mod sls;
pub mod system;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
