//! Reward sources and advantages.
//!
//! Group advantages follow the Dr. GRPO convention: centre by the group mean,
//! never divide by the group standard deviation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};

/// A correct response for the verifiable task. `prompt: None` accepts the
/// token sequence under any prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<usize>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RewardSource {
    /// 1 with probability `p`, else 0, independent of the response.
    Bernoulli { p: f64 },
    /// Standard normal draw, independent of the response.
    Gaussian,
    /// 1 when the response is in the target set, else 0.
    Verifiable { targets: Vec<Target> },
}

impl RewardSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardSource::Bernoulli { p } if !(0.0..=1.0).contains(p) => Err(
                Error::InvalidParameter(format!("bernoulli p = {p} outside [0, 1]")),
            ),
            RewardSource::Verifiable { targets } if targets.is_empty() => Err(
                Error::InvalidParameter("verifiable reward needs at least one target".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_verifiable(&self) -> bool {
        matches!(self, RewardSource::Verifiable { .. })
    }

    /// Whether `tokens` under `prompt` is a correct response. Always false for
    /// random sources.
    pub fn is_correct(&self, prompt: usize, tokens: &[usize]) -> bool {
        match self {
            RewardSource::Verifiable { targets } => targets
                .iter()
                .any(|t| t.prompt.is_none_or(|p| p == prompt) && t.tokens == tokens),
            _ => false,
        }
    }
}

/// Draw the reward for one trajectory.
pub fn draw_reward<R: Rng + ?Sized>(
    source: &RewardSource,
    trajectory: &Trajectory,
    rng: &mut R,
) -> f64 {
    match source {
        RewardSource::Bernoulli { p } => {
            if rng.random::<f64>() < *p {
                1.0
            } else {
                0.0
            }
        }
        RewardSource::Gaussian => rng.sample(StandardNormal),
        RewardSource::Verifiable { .. } => {
            if source.is_correct(trajectory.prompt, &trajectory.tokens) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// `A_i = r_i - mean(r)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Symmetric advantage law: `+mu` and `-mu` with probability `nu` each, `0`
/// otherwise. Mean zero, `P(A>0) = P(A<0) = nu`, `E[A | A>0] = mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageModel {
    pub nu: f64,
    pub mu: f64,
}

impl AdvantageModel {
    pub fn new(nu: f64, mu: f64) -> Result<Self> {
        let model = Self { nu, mu };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "nu = {} outside (0, 1/2]",
                self.nu
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mu = {} must be positive",
                self.mu
            )));
        }
        Ok(())
    }

    /// `mu * nu`, the factor every idealized update is scaled by.
    pub fn strength(&self) -> f64 {
        self.mu * self.nu
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.nu {
            self.mu
        } else if u < 2.0 * self.nu {
            -self.mu
        } else {
            0.0
        }
    }
}

impl Default for AdvantageModel {
    /// The law induced by centred Bernoulli(1/2) rewards in large groups.
    fn default() -> Self {
        Self { nu: 0.5, mu: 0.5 }
    }
}

/// `draw` as a free function, mirroring [`draw_reward`].
pub fn idealized_advantage<R: Rng + ?Sized>(model: &AdvantageModel, rng: &mut R) -> f64 {
    model.draw(rng)
}

/// K responses to one prompt with their rewards and centred advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::SpecMismatch(format!(
                "{} trajectories but {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        if let Some(first) = trajectories.first() {
            if trajectories.iter().any(|t| t.prompt != first.prompt) {
                return Err(Error::InvalidParameter("group mixes prompts".into()));
            }
        }
        let advantages = group_advantages(&rewards)?;
        Ok(Self {
            trajectories,
            rewards,
            advantages,
        })
    }

    /// Group with explicitly supplied advantages (used by idealized-advantage
    /// experiments and tests).
    pub fn with_advantages(trajectories: Vec<Trajectory>, advantages: Vec<f64>) -> Result<Self> {
        if trajectories.len() != advantages.len() {
            return Err(Error::SpecMismatch(format!(
                "{} trajectories but {} advantages",
                trajectories.len(),
                advantages.len()
            )));
        }
        Ok(Self {
            rewards: advantages.clone(),
            trajectories,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}
