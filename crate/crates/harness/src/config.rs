//! Run configuration, loaded from TOML.
//!
//! Every section is optional and falls back to the desk-scale defaults; unknown
//! keys anywhere are rejected.

use std::fmt;
use std::path::Path;

use clipbias_core::objective::{parse_eps, CLIP_HIGH_OFF, CLIP_LOW_OFF};
use clipbias_core::{
    AdvantageModel, ClipConfig, OptimizerConfig, RewardSource, SnapshotNoise, TreeIndex, TreeSpec,
    Updater,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdaterChoice {
    #[serde(rename = "pg")]
    Pg,
    #[serde(rename = "npg")]
    Npg,
    #[serde(rename = "grpo-sgd")]
    GrpoSgd,
}

impl UpdaterChoice {
    pub fn idealized(self) -> Option<Updater> {
        match self {
            UpdaterChoice::Pg => Some(Updater::Pg),
            UpdaterChoice::Npg => Some(Updater::Npg),
            UpdaterChoice::GrpoSgd => None,
        }
    }
}

impl fmt::Display for UpdaterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdaterChoice::Pg => "pg",
            UpdaterChoice::Npg => "npg",
            UpdaterChoice::GrpoSgd => "grpo-sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    pub prompt_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_weights: Option<Vec<f64>>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            horizon: 3,
            prompt_count: 4,
            prompt_weights: None,
        }
    }
}

impl TreeConfig {
    pub fn spec(&self) -> Result<TreeSpec> {
        let spec = match &self.prompt_weights {
            None => TreeSpec::new(self.vocab_size, self.horizon, self.prompt_count),
            Some(w) => {
                if w.len() != self.prompt_count {
                    return Err(HarnessError::Config(format!(
                        "tree.prompt_weights has {} entries for {} prompts",
                        w.len(),
                        self.prompt_count
                    )));
                }
                TreeSpec::with_weights(self.vocab_size, self.horizon, w.clone())?
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Standard deviation of the initial i.i.d. normal logits.
    pub logit_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { logit_std: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Evaluate every `interval` steps (and always after the last one).
    pub interval: usize,
    /// Passes over the prompt set per evaluation.
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            interval: 10,
            repeats: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub updater: UpdaterChoice,
    /// Step size of the idealized updaters.
    pub eta: f64,
    /// Idealized updates per snapshot; grpo-sgd refreshes once per rollout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_refresh: Option<usize>,
    pub tree: TreeConfig,
    pub init: InitConfig,
    pub reward: RewardSource,
    pub clip: ClipConfig,
    pub advantage: AdvantageModel,
    pub snapshot_noise: SnapshotNoise,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            updater: UpdaterChoice::Pg,
            eta: 20.0,
            snapshot_refresh: None,
            tree: TreeConfig::default(),
            init: InitConfig::default(),
            reward: RewardSource::Bernoulli { p: 0.5 },
            clip: ClipConfig::default(),
            advantage: AdvantageModel::default(),
            snapshot_noise: SnapshotNoise::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Effective snapshot refresh period.
    pub fn refresh_period(&self) -> usize {
        match self.updater {
            UpdaterChoice::GrpoSgd => self.optimizer.updates_per_rollout,
            _ => self.snapshot_refresh.unwrap_or(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.tree.spec()?;
        TreeIndex::new(&spec)?;
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be positive".into()));
        }
        if !(self.init.logit_std >= 0.0 && self.init.logit_std.is_finite()) {
            return Err(HarnessError::Config(
                "init.logit_std must be finite and nonnegative".into(),
            ));
        }
        self.reward.validate()?;
        if let RewardSource::Verifiable { targets } = &self.reward {
            for t in targets {
                if t.tokens.len() != spec.horizon || t.tokens.iter().any(|&a| a >= spec.vocab_size)
                {
                    return Err(HarnessError::Config(format!(
                        "target {:?} is not a length-{} sequence over {} tokens",
                        t.tokens, spec.horizon, spec.vocab_size
                    )));
                }
                if t.prompt.is_some_and(|p| p >= spec.prompt_count) {
                    return Err(HarnessError::Config(format!(
                        "target prompt {:?} out of range",
                        t.prompt
                    )));
                }
            }
        }
        self.clip.validate()?;
        self.optimizer.validate()?;
        match self.updater {
            UpdaterChoice::GrpoSgd => {
                if let Some(m) = self.snapshot_refresh {
                    if m != self.optimizer.updates_per_rollout {
                        return Err(HarnessError::Config(format!(
                            "grpo-sgd refreshes the snapshot every optimizer.updates_per_rollout = {} updates; snapshot_refresh = {m} disagrees",
                            self.optimizer.updates_per_rollout
                        )));
                    }
                }
            }
            _ => {
                self.advantage.validate()?;
                self.snapshot_noise.validate()?;
                if !(self.eta > 0.0 && self.eta.is_finite()) {
                    return Err(HarnessError::Config(format!(
                        "eta = {} must be positive",
                        self.eta
                    )));
                }
                if self.snapshot_refresh == Some(0) {
                    return Err(HarnessError::Config(
                        "snapshot_refresh must be positive".into(),
                    ));
                }
            }
        }
        if self.eval.k == 0 || self.eval.interval == 0 || self.eval.repeats == 0 {
            return Err(HarnessError::Config(
                "eval.k, eval.interval and eval.repeats must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a comma-separated list of clip epsilons; `off` maps to `off_value`.
pub fn parse_eps_list(text: &str, off_value: f64) -> Result<Vec<f64>> {
    let items: Vec<&str> = text.split(',').map(str::trim).collect();
    if items.iter().all(|s| s.is_empty()) {
        return Err(HarnessError::Config("empty epsilon list".into()));
    }
    items
        .into_iter()
        .map(|item| {
            let v = parse_eps(item, off_value)?;
            if !(v > 0.0) {
                return Err(HarnessError::Config(format!(
                    "epsilon {item:?} must be positive"
                )));
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_eps_low_list(text: &str) -> Result<Vec<f64>> {
    let list = parse_eps_list(text, CLIP_LOW_OFF)?;
    if let Some(v) = list.iter().find(|&&v| v > 1.0) {
        return Err(HarnessError::Config(format!("eps_low {v} exceeds 1")));
    }
    Ok(list)
}

pub fn parse_eps_high_list(text: &str) -> Result<Vec<f64>> {
    parse_eps_list(text, CLIP_HIGH_OFF)
}
