//! Tabular-policy machinery for studying how PPO/GRPO ratio clipping biases
//! policy entropy.
//!
//! The crate is organised bottom-up:
//!
//! - [`policy`]: tabular softmax policies, exact entropy and its logit gradient,
//!   sampling, importance ratios against a frozen snapshot.
//! - [`env`]: the prefix-tree token-generation MDP, trajectory sampling and the
//!   state visitation measure (exact forward pass or Monte Carlo).
//! - [`reward`]: random and verifiable reward sources, group-centred advantages
//!   and the idealized symmetric advantage law.
//! - [`objective`]: the clipped surrogate, its exact gradient, clip-event
//!   detection and the REINFORCE estimator.
//! - [`idealized`]: expected full-batch policy-gradient and natural
//!   policy-gradient updates driven only by clip events.
//! - [`trainer`]: the sampled minibatch GRPO trainer with an adaptive-moment
//!   optimizer.
//! - [`theory`]: first-order entropy-change predictors, the conditional
//!   statistics that sign them, and the residual-scaling diagnostic.

pub mod env;
pub mod error;
pub mod idealized;
pub mod objective;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use env::{StateIndex, Trajectory, TreeIndex, TreeSpec, VisitationMeasure};
pub use error::{Error, Result};
pub use idealized::{npg_step, pg_step, SnapshotNoise, Updater};
pub use objective::{
    detect_clip_events, reinforce_gradient, surrogate_gradient, surrogate_value, ClipConfig,
    ClipEventReport,
};
pub use policy::{PolicySnapshot, PolicyTable, StateActionMatrix, TabularPolicy};
pub use reward::{group_advantages, AdvantageModel, RewardSource, RolloutGroup};
pub use theory::{residual_scan, ResidualScan, TheoryStepReport};
pub use trainer::{batch_entropy_estimate, GrpoTrainer, OptimizerConfig, TrainStepLog};
