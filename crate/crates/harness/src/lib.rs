//! Experiment harness: TOML-configured runs of the idealized and sampled
//! clipped-update dynamics, clip ablations and theory validation, all emitting
//! CSV traces.

pub mod config;
pub mod error;
pub mod experiment;
pub mod validate;

pub use config::{
    parse_eps_high_list, parse_eps_list, parse_eps_low_list, RunConfig, UpdaterChoice,
};
pub use error::{HarnessError, Result};
pub use experiment::{
    ablate_clipping, aggregate_entropy, evaluate_pass_mean, run_experiment, EvalReport, RunSummary,
};
