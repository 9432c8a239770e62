//! Experiment harness for `plp-core`: JSON configs, seeded closed-loop
//! comparisons of the PLP controller against the two SLS baselines, the
//! pattern-statistics check and CSV output.

// `!(x <= y)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod harness;
pub mod scenario;

pub use config::{ConfigError, ControllerKind, ExperimentConfig};
pub use harness::{run_compare, run_single, HarnessError, RunMetrics, RunOutput};
pub use scenario::{Realization, Scenario};
