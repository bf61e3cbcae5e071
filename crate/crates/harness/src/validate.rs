//! Self-checks behind `clipbias validate`.

use clipbias_core::env::{rollout_from, visitation_exact};
use clipbias_core::objective::{surrogate_gradient, surrogate_value, CLIP_HIGH_OFF, CLIP_LOW_OFF};
use clipbias_core::rng::{lane_stream, Stream};
use clipbias_core::theory::ResidualScan;
use clipbias_core::{
    residual_scan, AdvantageModel, ClipConfig, PolicySnapshot, PolicyTable, RewardSource,
    RolloutGroup, SnapshotNoise, TreeIndex, TreeSpec, Updater, VisitationMeasure,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::Result;
use crate::experiment::{run_in_memory, ConditionTally};

/// Step sizes of the residual-scaling protocol.
pub const RESIDUAL_ETAS: [f64; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];
pub const RESIDUAL_MIN_SLOPE: f64 = 1.8;
pub const CONDITION_MIN_FRACTION: f64 = 0.95;

/// Clip settings cycled through by random gradient instances.
pub fn clip_menu() -> [ClipConfig; 5] {
    [
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.2,
        },
        ClipConfig {
            eps_low: 0.1,
            eps_high: 0.3,
        },
        ClipConfig {
            eps_low: 0.2,
            eps_high: CLIP_HIGH_OFF,
        },
        ClipConfig {
            eps_low: CLIP_LOW_OFF,
            eps_high: 0.2,
        },
        ClipConfig {
            eps_low: 0.3,
            eps_high: 0.1,
        },
    ]
}

/// A random surrogate instance on a small tree.
#[derive(Clone, Debug)]
pub struct SurrogateInstance {
    pub index: TreeIndex,
    pub policy: PolicyTable,
    pub snapshot: PolicySnapshot,
    pub groups: Vec<RolloutGroup>,
    pub clip: ClipConfig,
}

/// Groups of `group_size` rollouts sampled under the snapshot, Gaussian
/// rewards, current policy a perturbation of the snapshot.
pub fn surrogate_instance(
    seed: u64,
    vocab: usize,
    horizon: usize,
    groups: usize,
    group_size: usize,
) -> Result<SurrogateInstance> {
    let mut rng = lane_stream(seed, 0);
    let index = TreeIndex::new(&TreeSpec::new(vocab, horizon, 2))?;
    let old = PolicyTable::random(index.state_count(), vocab, 1.0, &mut rng);
    let snapshot = old.snapshot();
    let mut policy = old;
    for v in policy.logits_mut().as_mut_slice() {
        *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let source = RewardSource::Gaussian;
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let prompt = g % 2;
        let mut trajectories = Vec::with_capacity(group_size);
        let mut rewards = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let traj = rollout_from(&snapshot, &index, prompt, &mut rng)?;
            rewards.push(clipbias_core::reward::draw_reward(&source, &traj, &mut rng));
            trajectories.push(traj);
        }
        out.push(RolloutGroup::new(trajectories, rewards)?);
    }
    let clip = clip_menu()[(seed % 5) as usize];
    Ok(SurrogateInstance {
        index,
        policy,
        snapshot,
        groups: out,
        clip,
    })
}

impl SurrogateInstance {
    /// Smallest distance of any sampled ratio to a finite clip threshold.
    pub fn boundary_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for g in &self.groups {
            for t in &g.trajectories {
                for (&s, &a) in t.state_path.iter().zip(&t.tokens) {
                    let r = self.policy.softmax_probs(s).expect("state in range")[a]
                        / self.snapshot.prob(s, a);
                    for b in [self.clip.lower(), self.clip.upper()] {
                        if b.is_finite() && b > 0.0 {
                            gap = gap.min((r - b).abs());
                        }
                    }
                }
            }
        }
        gap
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub seed: u64,
    pub skipped: bool,
    /// `max |g - fd| / max(max |g|, max |fd|)`.
    pub rel_error: f64,
}

/// Compare the analytic surrogate gradient against central differences.
pub fn check_gradient(seed: u64, step: f64) -> Result<GradientCheck> {
    let inst = surrogate_instance(seed, 5, 2, 3, 4)?;
    if inst.boundary_gap() <= 1e-6 {
        return Ok(GradientCheck {
            seed,
            skipped: true,
            rel_error: 0.0,
        });
    }
    let grad = surrogate_gradient(&inst.policy, &inst.snapshot, &inst.groups, &inst.clip)?;
    let mut probe = inst.policy.clone();
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for i in 0..grad.as_slice().len() {
        let base = probe.logits().as_slice()[i];
        probe.logits_mut().as_mut_slice()[i] = base + step;
        let up = surrogate_value(&probe, &inst.snapshot, &inst.groups, &inst.clip)?;
        probe.logits_mut().as_mut_slice()[i] = base - step;
        let down = surrogate_value(&probe, &inst.snapshot, &inst.groups, &inst.clip)?;
        probe.logits_mut().as_mut_slice()[i] = base;
        let fd = (up - down) / (2.0 * step);
        let g = grad.as_slice()[i];
        worst = worst.max((g - fd).abs());
        scale = scale.max(g.abs()).max(fd.abs());
    }
    Ok(GradientCheck {
        seed,
        skipped: false,
        rel_error: if scale > 0.0 { worst / scale } else { worst },
    })
}

/// A random event-bearing idealized-update instance.
#[derive(Clone, Debug)]
pub struct IdealizedInstance {
    pub policy: PolicyTable,
    pub snapshot: PolicySnapshot,
    pub visitation: VisitationMeasure,
    pub model: AdvantageModel,
    pub clip: ClipConfig,
}

pub fn idealized_instance(seed: u64, vocab: usize, horizon: usize) -> Result<IdealizedInstance> {
    let index = TreeIndex::new(&TreeSpec::new(vocab, horizon, 1))?;
    let mut rng: Stream = lane_stream(seed, 0);
    let noise = SnapshotNoise {
        samples: 20.0,
        max_log_std: 1.0,
    };
    let clip = ClipConfig::default();
    loop {
        let policy = PolicyTable::random(index.state_count(), vocab, 1.0, &mut rng);
        let snapshot = noise.snapshot(&policy, &mut rng)?;
        let visitation = visitation_exact(&snapshot, &index)?;
        let has_events = (0..policy.state_count()).any(|s| {
            policy
                .ratios(&snapshot, s)
                .map(|r| r.iter().any(|&x| x < clip.lower() || x > clip.upper()))
                .unwrap_or(false)
        });
        if has_events {
            return Ok(IdealizedInstance {
                policy,
                snapshot,
                visitation,
                model: AdvantageModel::default(),
                clip,
            });
        }
    }
}

pub fn scan_instance(seed: u64, updater: Updater) -> Result<ResidualScan> {
    let inst = idealized_instance(seed, 5, 2)?;
    Ok(residual_scan(
        &inst.policy,
        &inst.snapshot,
        &inst.model,
        &inst.clip,
        &RESIDUAL_ETAS,
        updater,
        &inst.visitation,
    )?)
}

/// The symmetric random-reward setting whose sign conditions are tracked.
pub fn condition_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

/// Tally the sign conditions over the symmetric idealized runs for `seeds`.
pub fn condition_tally(seeds: &[u64]) -> Result<ConditionTally> {
    let mut tally = ConditionTally::default();
    for &seed in seeds {
        tally.merge(&run_in_memory(&condition_config(seed))?.conditions);
    }
    Ok(tally)
}
