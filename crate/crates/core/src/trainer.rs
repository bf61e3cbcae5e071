//! Sampled minibatch GRPO with an adaptive-moment optimizer.
//!
//! One outer iteration freezes the current policy as `pi_old`, collects
//! `prompts_per_rollout` groups of `group_size` responses, centres rewards
//! within each group, then takes `updates_per_rollout` ascent steps on the
//! clipped surrogate over shuffled minibatches.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout_from, Trajectory, TreeIndex, TreeSpec};
use crate::error::{Error, Result};
use crate::objective::{
    clip_fractions, surrogate_gradient_batch, surrogate_value_batch, ClipConfig,
};
use crate::policy::{sample_from, PolicySnapshot, PolicyTable, StateActionMatrix};
use crate::reward::{draw_reward, RewardSource, RolloutGroup};
use crate::rng::lane_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub prompts_per_rollout: usize,
    pub group_size: usize,
    pub minibatch_size: usize,
    pub updates_per_rollout: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub temperature: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            prompts_per_rollout: 64,
            group_size: 8,
            minibatch_size: 256,
            updates_per_rollout: 16,
            learning_rate: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            temperature: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn rollout_batch(&self) -> usize {
        self.prompts_per_rollout * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.prompts_per_rollout == 0
            || self.updates_per_rollout == 0
            || self.minibatch_size == 0
        {
            return bad("rollout, minibatch and update counts must be positive".into());
        }
        if self.group_size < 2 {
            return bad(format!(
                "group_size = {} must be at least 2",
                self.group_size
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate = {} must be finite and nonnegative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon = {} must be positive", self.epsilon));
        }
        if self.temperature != 1.0 {
            return bad(format!(
                "temperature = {} unsupported, only 1 is implemented",
                self.temperature
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: StateActionMatrix,
    v: StateActionMatrix,
    t: i32,
}

impl Adam {
    fn new(states: usize, actions: usize) -> Self {
        Self {
            m: StateActionMatrix::zeros(states, actions),
            v: StateActionMatrix::zeros(states, actions),
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    fn step(
        &mut self,
        params: &mut StateActionMatrix,
        grad: &StateActionMatrix,
        cfg: &OptimizerConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (i, (theta, &g)) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .enumerate()
        {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// One inner update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStepLog {
    /// Global inner-update index, starting at 0.
    pub step: usize,
    /// Batch entropy estimate of the rollout batch before this update.
    pub entropy_est: f64,
    pub clip_frac_low: f64,
    pub clip_frac_high: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub reward_mean: f64,
}

/// Result of one outer iteration.
#[derive(Clone, Debug)]
pub struct Epoch {
    pub snapshot: PolicySnapshot,
    pub groups: Vec<RolloutGroup>,
    pub logs: Vec<TrainStepLog>,
}

/// Mean over trajectories of the average current-policy entropy along each
/// visited state path.
pub fn batch_entropy_estimate(policy: &PolicyTable, trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut cache: Vec<Option<f64>> = vec![None; policy.state_count()];
    let mut total = 0.0;
    for traj in trajectories {
        if traj.is_empty() {
            return Err(Error::InvalidParameter("empty trajectory".into()));
        }
        let mut acc = 0.0;
        for &s in &traj.state_path {
            let slot = cache.get_mut(s).ok_or(Error::StateOutOfRange {
                state: s,
                state_count: policy.state_count(),
            })?;
            acc += match slot {
                Some(h) => *h,
                None => *slot.insert(policy.state_entropy(s)?),
            };
        }
        total += acc / traj.len() as f64;
    }
    Ok(total / trajectories.len() as f64)
}

/// Collect groups under `policy`, one deterministic lane per group.
pub fn collect_groups(
    policy: &PolicyTable,
    index: &TreeIndex,
    source: &RewardSource,
    prompts: usize,
    group_size: usize,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    (0..prompts)
        .into_par_iter()
        .map(|lane| {
            let mut rng = lane_stream(seed, lane as u64);
            let prompt = sample_from(&index.spec().prompt_weights, &mut rng);
            let mut trajectories = Vec::with_capacity(group_size);
            let mut rewards = Vec::with_capacity(group_size);
            for _ in 0..group_size {
                let traj = rollout_from(policy, index, prompt, &mut rng)?;
                rewards.push(draw_reward(source, &traj, &mut rng));
                trajectories.push(traj);
            }
            RolloutGroup::new(trajectories, rewards)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GrpoTrainer {
    index: TreeIndex,
    source: RewardSource,
    clip: ClipConfig,
    opt: OptimizerConfig,
    adam: Adam,
    updates: usize,
}

impl GrpoTrainer {
    pub fn new(
        spec: &TreeSpec,
        source: RewardSource,
        clip: ClipConfig,
        opt: OptimizerConfig,
    ) -> Result<Self> {
        source.validate()?;
        clip.validate()?;
        opt.validate()?;
        let index = TreeIndex::new(spec)?;
        let adam = Adam::new(index.state_count(), spec.vocab_size);
        Ok(Self {
            index,
            source,
            clip,
            opt,
            adam,
            updates: 0,
        })
    }

    pub fn index(&self) -> &TreeIndex {
        &self.index
    }

    pub fn clip(&self) -> &ClipConfig {
        &self.clip
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.opt
    }

    /// Inner updates taken so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        policy: &mut PolicyTable,
        rng: &mut R,
    ) -> Result<Epoch> {
        if policy.state_count() != self.index.state_count()
            || policy.action_count() != self.index.vocab_size()
        {
            return Err(Error::SpecMismatch(format!(
                "policy is {}x{}, tree needs {}x{}",
                policy.state_count(),
                policy.action_count(),
                self.index.state_count(),
                self.index.vocab_size()
            )));
        }
        let snapshot = policy.snapshot();
        let groups = collect_groups(
            policy,
            &self.index,
            &self.source,
            self.opt.prompts_per_rollout,
            self.opt.group_size,
            rng.random(),
        )?;
        let samples: Vec<(&Trajectory, f64)> = crate::objective::samples(&groups);
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let trajectories: Vec<Trajectory> = samples.iter().map(|(t, _)| (*t).clone()).collect();
        let reward_mean =
            groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / samples.len() as f64;

        let mb = self.opt.minibatch_size.min(samples.len());
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = samples.len();
        let mut logs = Vec::with_capacity(self.opt.updates_per_rollout);
        for _ in 0..self.opt.updates_per_rollout {
            if cursor + mb > order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let batch: Vec<(&Trajectory, f64)> = order[cursor..cursor + mb]
                .iter()
                .map(|&i| samples[i])
                .collect();
            cursor += mb;

            let entropy_est = batch_entropy_estimate(policy, &trajectories)?;
            let surrogate = surrogate_value_batch(policy, &snapshot, &batch, &self.clip)?;
            let fractions = clip_fractions(policy, &snapshot, &batch, &self.clip)?;
            let grad = surrogate_gradient_batch(policy, &snapshot, &batch, &self.clip)?;
            if !grad.is_finite() || !surrogate.is_finite() {
                return Err(Error::NonFinite {
                    what: "surrogate gradient",
                    step: self.updates,
                });
            }
            self.adam.step(policy.logits_mut(), &grad, &self.opt);
            if !policy.logits().is_finite() {
                return Err(Error::NonFinite {
                    what: "logits",
                    step: self.updates,
                });
            }
            logs.push(TrainStepLog {
                step: self.updates,
                entropy_est,
                clip_frac_low: fractions.low,
                clip_frac_high: fractions.high,
                surrogate,
                grad_norm: grad.l2_norm(),
                reward_mean,
            });
            self.updates += 1;
        }
        Ok(Epoch {
            snapshot,
            groups,
            logs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small_opt() -> OptimizerConfig {
        OptimizerConfig {
            prompts_per_rollout: 8,
            group_size: 4,
            minibatch_size: 16,
            updates_per_rollout: 4,
            learning_rate: 0.01,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn defaults_mirror_reference_settings() {
        let opt = OptimizerConfig::default();
        assert_eq!(opt.group_size, 8);
        assert_eq!(opt.rollout_batch(), 512);
        assert_eq!(opt.minibatch_size, 256);
        assert_eq!(opt.updates_per_rollout, 16);
        assert_eq!(opt.learning_rate, 5e-7);
        assert_eq!(opt.temperature, 1.0);
        assert!(opt.validate().is_ok());
    }

    #[test]
    fn validation() {
        let opt = OptimizerConfig {
            group_size: 1,
            ..OptimizerConfig::default()
        };
        assert!(opt.validate().is_err());
        let opt = OptimizerConfig {
            temperature: 0.6,
            ..OptimizerConfig::default()
        };
        assert!(opt.validate().is_err());
        let opt = OptimizerConfig {
            learning_rate: f64::NAN,
            ..OptimizerConfig::default()
        };
        assert!(opt.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_policy_and_logs() {
        let spec = TreeSpec::new(3, 2, 2);
        let opt = OptimizerConfig {
            learning_rate: 0.0,
            ..small_opt()
        };
        let mut trainer = GrpoTrainer::new(
            &spec,
            RewardSource::Bernoulli { p: 0.5 },
            ClipConfig::default(),
            opt,
        )
        .unwrap();
        let mut policy =
            PolicyTable::random(trainer.index().state_count(), 3, 1.0, &mut rng::stream(0));
        let before = policy.clone();
        let epoch = trainer
            .train_epoch(&mut policy, &mut rng::stream(1))
            .unwrap();
        assert_eq!(policy, before);
        assert_eq!(epoch.logs.len(), 4);
        assert_eq!(trainer.updates(), 4);
        assert!(epoch.logs.iter().all(|l| l.entropy_est.is_finite()));
    }

    #[test]
    fn epochs_are_reproducible() {
        let spec = TreeSpec::new(3, 2, 2);
        let run = || {
            let mut trainer = GrpoTrainer::new(
                &spec,
                RewardSource::Gaussian,
                ClipConfig::default(),
                small_opt(),
            )
            .unwrap();
            let mut policy =
                PolicyTable::random(trainer.index().state_count(), 3, 1.0, &mut rng::stream(4));
            let mut r = rng::stream(5);
            let mut logs = Vec::new();
            for _ in 0..3 {
                logs.extend(trainer.train_epoch(&mut policy, &mut r).unwrap().logs);
            }
            (policy, logs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_batch_entropy() {
        let spec = TreeSpec::new(4, 3, 1);
        let index = TreeIndex::new(&spec).unwrap();
        let policy = PolicyTable::uniform(index.state_count(), 4);
        let groups = collect_groups(
            &policy,
            &index,
            &RewardSource::Bernoulli { p: 0.5 },
            3,
            4,
            7,
        )
        .unwrap();
        let trajs: Vec<Trajectory> = groups.into_iter().flat_map(|g| g.trajectories).collect();
        assert!((batch_entropy_estimate(&policy, &trajs).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(batch_entropy_estimate(&policy, &[]), Err(Error::EmptyBatch));
    }
}
