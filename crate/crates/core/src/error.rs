use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("state index {state} out of range (state count {state_count})")]
    StateOutOfRange { state: usize, state_count: usize },

    #[error("action index {action} out of range (action count {action_count})")]
    ActionOutOfRange { action: usize, action_count: usize },

    #[error("snapshot probability {prob:e} at state {state}, action {action} is degenerate")]
    DegenerateSnapshot {
        state: usize,
        action: usize,
        prob: f64,
    },

    #[error(
        "tree needs {required} leaf paths but the exact-mode budget is {budget}; \
         use Monte Carlo visitation instead"
    )]
    ExactModeTooLarge { required: u128, budget: u64 },

    #[error("dimension mismatch: {0}")]
    SpecMismatch(String),

    #[error("group of {0} rewards is too small to centre (need at least 2)")]
    DegenerateGroup(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("conditional expectation {0} is undefined but its multiplier is nonzero")]
    UndefinedConditional(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
