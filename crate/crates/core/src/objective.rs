//! The clipped GRPO/PPO surrogate.
//!
//! For a batch of trajectories sampled under the snapshot `pi_old`,
//!
//! ```text
//! J = mean_i (1/T_i) sum_t min(r_t A_i, clip(r_t, 1 - eps_low, 1 + eps_high) A_i)
//! r_t = pi(y_t | s_t) / pi_old(y_t | s_t)
//! ```
//!
//! The optimizer ascends `J`. A token whose ratio sits in a clipped region
//! (`A > 0, r > 1 + eps_high` or `A < 0, r < 1 - eps_low`) is on a flat arm of
//! the `min` and contributes no gradient. Ties at a threshold count as
//! unclipped.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::policy::{PolicySnapshot, PolicyTable, StateActionMatrix, PROB_FLOOR};
use crate::reward::RolloutGroup;

/// `eps_low = 1` puts the lower threshold at 0, which a positive ratio never
/// crosses.
pub const CLIP_LOW_OFF: f64 = 1.0;
/// Upper threshold at `+inf`.
pub const CLIP_HIGH_OFF: f64 = f64::INFINITY;

/// Clip range `[1 - eps_low, 1 + eps_high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    #[serde(deserialize_with = "de_eps_low")]
    pub eps_low: f64,
    #[serde(serialize_with = "ser_eps_high", deserialize_with = "de_eps_high")]
    pub eps_high: f64,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        let clip = Self { eps_low, eps_high };
        clip.validate()?;
        Ok(clip)
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    /// Both mechanisms disabled.
    pub fn off() -> Self {
        Self {
            eps_low: CLIP_LOW_OFF,
            eps_high: CLIP_HIGH_OFF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_low = {} outside (0, 1]",
                self.eps_low
            )));
        }
        if !(self.eps_high > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_high = {} must be positive",
                self.eps_high
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    #[inline]
    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }

    pub fn clip_low_off(&self) -> bool {
        self.eps_low >= CLIP_LOW_OFF
    }

    pub fn clip_high_off(&self) -> bool {
        self.eps_high.is_infinite()
    }

    /// `min(r A, clip(r) A)` and its derivative in `r`.
    #[inline]
    pub fn term(&self, ratio: f64, advantage: f64) -> (f64, f64) {
        if advantage > 0.0 && ratio > self.upper() {
            (self.upper() * advantage, 0.0)
        } else if advantage < 0.0 && ratio < self.lower() {
            (self.lower() * advantage, 0.0)
        } else {
            (ratio * advantage, advantage)
        }
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
        }
    }
}

/// Parse one clip epsilon: a positive number, or `off` / `inf`.
pub fn parse_eps(text: &str, off_value: f64) -> Result<f64> {
    let t = text.trim();
    match t.to_ascii_lowercase().as_str() {
        "off" | "none" => Ok(off_value),
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => t
            .parse::<f64>()
            .map_err(|_| Error::InvalidParameter(format!("cannot parse clip epsilon {t:?}"))),
    }
}

struct EpsVisitor(f64);

impl Visitor<'_> for EpsVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a positive number or \"off\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
        parse_eps(v, self.0).map_err(E::custom)
    }
}

fn de_eps_low<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    d.deserialize_any(EpsVisitor(CLIP_LOW_OFF))
}

fn de_eps_high<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    d.deserialize_any(EpsVisitor(CLIP_HIGH_OFF))
}

fn ser_eps_high<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("off")
    } else {
        s.serialize_f64(*v)
    }
}

/// Clip events at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEventReport {
    pub state: usize,
    /// Actions with `ratio < 1 - eps_low` (the set X).
    pub low: Vec<usize>,
    /// Actions with `ratio > 1 + eps_high` (the set Y).
    pub high: Vec<usize>,
    /// `pi_k(X)`.
    pub p: f64,
    /// `pi_k(Y)`.
    pub q: f64,
    /// `pi_old(X)`, logged for comparison with `p`.
    pub p_old: f64,
    /// `pi_old(Y)`.
    pub q_old: f64,
    /// `1_X(a) - 1_Y(a)` per action.
    pub h: Vec<f64>,
}

impl ClipEventReport {
    pub fn is_empty(&self) -> bool {
        self.low.is_empty() && self.high.is_empty()
    }
}

/// Clip events at `state`, with masses under the current policy.
pub fn detect_clip_events(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    state: usize,
    clip: &ClipConfig,
) -> Result<ClipEventReport> {
    let probs = policy.softmax_probs(state)?;
    let ratios = policy.ratios(snapshot, state)?;
    Ok(events_from_ratios(
        state,
        &probs,
        snapshot.row(state),
        &ratios,
        clip,
    ))
}

pub(crate) fn events_from_ratios(
    state: usize,
    probs: &[f64],
    old: &[f64],
    ratios: &[f64],
    clip: &ClipConfig,
) -> ClipEventReport {
    let mut report = ClipEventReport {
        state,
        low: Vec::new(),
        high: Vec::new(),
        p: 0.0,
        q: 0.0,
        p_old: 0.0,
        q_old: 0.0,
        h: vec![0.0; probs.len()],
    };
    for (a, &r) in ratios.iter().enumerate() {
        if r < clip.lower() {
            report.low.push(a);
            report.p += probs[a];
            report.p_old += old[a];
            report.h[a] = 1.0;
        } else if r > clip.upper() {
            report.high.push(a);
            report.q += probs[a];
            report.q_old += old[a];
            report.h[a] = -1.0;
        }
    }
    report
}

/// Flattened `(trajectory, advantage)` view of a set of groups.
pub fn samples(groups: &[RolloutGroup]) -> Vec<(&Trajectory, f64)> {
    groups
        .iter()
        .flat_map(|g| g.trajectories.iter().zip(g.advantages.iter().copied()))
        .collect()
}

fn check_batch(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    batch: &[(&Trajectory, f64)],
) -> Result<()> {
    policy.check_shape(snapshot)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (traj, _) in batch {
        if traj.is_empty() {
            return Err(Error::InvalidParameter("empty trajectory".into()));
        }
        for (&s, &a) in traj.state_path.iter().zip(&traj.tokens) {
            if s >= policy.state_count() || a >= policy.action_count() {
                return Err(Error::SpecMismatch(format!(
                    "token ({s}, {a}) outside a {}x{} policy",
                    policy.state_count(),
                    policy.action_count()
                )));
            }
        }
    }
    Ok(())
}

#[inline]
fn token_ratio(
    probs: &StateActionMatrix,
    snapshot: &PolicySnapshot,
    s: usize,
    a: usize,
) -> Result<f64> {
    let old = snapshot.prob(s, a);
    if old < PROB_FLOOR {
        return Err(Error::DegenerateSnapshot {
            state: s,
            action: a,
            prob: old,
        });
    }
    Ok(probs.get(s, a) / old)
}

/// Surrogate value on an arbitrary batch.
pub fn surrogate_value_batch(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    batch: &[(&Trajectory, f64)],
    clip: &ClipConfig,
) -> Result<f64> {
    check_batch(policy, snapshot, batch)?;
    let probs = policy.probabilities();
    let mut total = 0.0;
    for (traj, adv) in batch {
        let mut acc = 0.0;
        for (&s, &a) in traj.state_path.iter().zip(&traj.tokens) {
            acc += clip.term(token_ratio(&probs, snapshot, s, a)?, *adv).0;
        }
        total += acc / traj.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`surrogate_value_batch`] with respect to every logit.
pub fn surrogate_gradient_batch(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    batch: &[(&Trajectory, f64)],
    clip: &ClipConfig,
) -> Result<StateActionMatrix> {
    check_batch(policy, snapshot, batch)?;
    let probs = policy.probabilities();
    let mut grad = StateActionMatrix::zeros(policy.state_count(), policy.action_count());
    let n = batch.len() as f64;
    for (traj, adv) in batch {
        let scale = 1.0 / (traj.len() as f64 * n);
        for (&s, &a) in traj.state_path.iter().zip(&traj.tokens) {
            let r = token_ratio(&probs, snapshot, s, a)?;
            let (_, d_ratio) = clip.term(r, *adv);
            if d_ratio == 0.0 {
                continue;
            }
            // d r / d theta[s, b] = r (1{b = a} - pi(b|s))
            let c = d_ratio * r * scale;
            let row = grad.row_mut(s);
            for (b, g) in row.iter_mut().enumerate() {
                *g -= c * probs.get(s, b);
            }
            row[a] += c;
        }
    }
    Ok(grad)
}

pub fn surrogate_value(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
) -> Result<f64> {
    surrogate_value_batch(policy, snapshot, &samples(groups), clip)
}

pub fn surrogate_gradient(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
) -> Result<StateActionMatrix> {
    surrogate_gradient_batch(policy, snapshot, &samples(groups), clip)
}

/// Token fractions whose ratio falls below / above the clip thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClipFractions {
    pub low: f64,
    pub high: f64,
}

pub fn clip_fractions(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    batch: &[(&Trajectory, f64)],
    clip: &ClipConfig,
) -> Result<ClipFractions> {
    check_batch(policy, snapshot, batch)?;
    let probs = policy.probabilities();
    let (mut low, mut high, mut tokens) = (0usize, 0usize, 0usize);
    for (traj, _) in batch {
        for (&s, &a) in traj.state_path.iter().zip(&traj.tokens) {
            let r = token_ratio(&probs, snapshot, s, a)?;
            tokens += 1;
            if r < clip.lower() {
                low += 1;
            } else if r > clip.upper() {
                high += 1;
            }
        }
    }
    Ok(ClipFractions {
        low: low as f64 / tokens as f64,
        high: high as f64 / tokens as f64,
    })
}

/// REINFORCE estimate `mean_i sum_t A_i grad log pi(y_t | s_t)` for on-policy
/// trajectories.
pub fn reinforce_gradient(
    policy: &PolicyTable,
    groups: &[RolloutGroup],
) -> Result<StateActionMatrix> {
    reinforce_gradient_batch(policy, &samples(groups))
}

pub fn reinforce_gradient_batch(
    policy: &PolicyTable,
    batch: &[(&Trajectory, f64)],
) -> Result<StateActionMatrix> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probs = policy.probabilities();
    let mut grad = StateActionMatrix::zeros(policy.state_count(), policy.action_count());
    let n = batch.len() as f64;
    for (traj, adv) in batch {
        if *adv == 0.0 {
            continue;
        }
        let c = adv / n;
        for (&s, &a) in traj.state_path.iter().zip(&traj.tokens) {
            if s >= policy.state_count() || a >= policy.action_count() {
                return Err(Error::SpecMismatch(format!(
                    "token ({s}, {a}) outside the policy"
                )));
            }
            let row = grad.row_mut(s);
            for (b, g) in row.iter_mut().enumerate() {
                *g -= c * probs.get(s, b);
            }
            row[a] += c;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::StateActionMatrix;

    fn one_state(logits: &[f64]) -> PolicyTable {
        PolicyTable::from_logits(
            StateActionMatrix::from_vec(1, logits.len(), logits.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn snapshot_of(probs: &[f64]) -> PolicySnapshot {
        PolicySnapshot::from_probs(
            StateActionMatrix::from_vec(1, probs.len(), probs.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn traj(tokens: &[usize], states: &[usize]) -> Trajectory {
        Trajectory {
            prompt: 0,
            tokens: tokens.to_vec(),
            state_path: states.to_vec(),
            old_logprobs: vec![0.0; tokens.len()],
        }
    }

    #[test]
    fn config_validation() {
        assert!(ClipConfig::new(0.0, 0.2).is_err());
        assert!(ClipConfig::new(1.2, 0.2).is_err());
        assert!(ClipConfig::new(0.2, 0.0).is_err());
        assert!(ClipConfig::new(CLIP_LOW_OFF, CLIP_HIGH_OFF).is_ok());
        assert_eq!(ClipConfig::off().lower(), 0.0);
        assert_eq!(ClipConfig::off().upper(), f64::INFINITY);
    }

    #[test]
    fn eps_parsing() {
        assert_eq!(parse_eps("off", CLIP_HIGH_OFF).unwrap(), f64::INFINITY);
        assert_eq!(parse_eps("OFF", CLIP_LOW_OFF).unwrap(), 1.0);
        assert_eq!(parse_eps(" 0.15 ", CLIP_LOW_OFF).unwrap(), 0.15);
        assert!(parse_eps("abc", CLIP_LOW_OFF).is_err());
    }

    #[test]
    fn term_arms() {
        let clip = ClipConfig::symmetric(0.2).unwrap();
        assert_eq!(clip.term(1.5, 1.0), (1.2, 0.0));
        assert_eq!(clip.term(0.5, 1.0), (0.5, 1.0));
        assert_eq!(clip.term(0.5, -1.0), (-0.8, 0.0));
        assert_eq!(clip.term(1.5, -1.0), (-1.5, -1.0));
        // ties are unclipped
        assert_eq!(clip.term(1.2, 1.0).1, 1.0);
        assert_eq!(clip.term(0.8, -1.0).1, -1.0);
    }

    #[test]
    fn events_identity_and_thresholds() {
        let policy = one_state(&[0.1, 0.5, -0.3]);
        let clip = ClipConfig::symmetric(0.2).unwrap();
        let report = detect_clip_events(&policy, &policy.snapshot(), 0, &clip).unwrap();
        assert!(report.is_empty());
        assert_eq!((report.p, report.q), (0.0, 0.0));

        // ratio 0.7 for action 0
        let live = one_state(&[0.35f64.ln(), 0.65f64.ln()]);
        let report = detect_clip_events(&live, &snapshot_of(&[0.5, 0.5]), 0, &clip).unwrap();
        assert_eq!(report.low, vec![0]);
        assert_eq!(report.high, vec![1]);
        assert!((report.p - 0.35).abs() < 1e-15);
        assert!((report.p_old - 0.5).abs() < 1e-15);
        assert_eq!(report.h, vec![1.0, -1.0]);

        let no_high = ClipConfig::new(0.2, CLIP_HIGH_OFF).unwrap();
        let report = detect_clip_events(&live, &snapshot_of(&[0.5, 0.5]), 0, &no_high).unwrap();
        assert!(report.high.is_empty());
    }

    #[test]
    fn value_at_snapshot_is_mean_advantage() {
        let policy = one_state(&[0.2, -0.4, 0.9]);
        let snap = policy.snapshot();
        let t = traj(&[1], &[0]);
        let u = traj(&[2], &[0]);
        let group = RolloutGroup::new(vec![t.clone(), u.clone()], vec![1.0, 0.0]).unwrap();
        let clip = ClipConfig::default();
        assert!(
            surrogate_value(&policy, &snap, &[group], &clip)
                .unwrap()
                .abs()
                < 1e-12
        );

        let zero = RolloutGroup::with_advantages(vec![t, u], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            surrogate_value(&policy, &snap, std::slice::from_ref(&zero), &clip).unwrap(),
            0.0
        );
        assert_eq!(reinforce_gradient(&policy, &[zero]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn fully_clipped_batch_has_zero_gradient() {
        // ratio of action 0 is 4 (A > 0, clipped high); ratio of action 1 is ~0.05 (A < 0, clipped low)
        let live = one_state(&[0.8f64.ln(), 0.01f64.ln(), 0.19f64.ln()]);
        let old = snapshot_of(&[0.2, 0.2, 0.6]);
        let batch = [
            RolloutGroup::with_advantages(vec![traj(&[0], &[0])], vec![1.0]).unwrap(),
            RolloutGroup::with_advantages(vec![traj(&[1], &[0])], vec![-1.0]).unwrap(),
        ];
        let g = surrogate_gradient(&live, &old, &batch, &ClipConfig::default()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn empty_and_mismatched_batches() {
        let policy = one_state(&[0.0, 0.0]);
        let snap = policy.snapshot();
        assert_eq!(
            surrogate_value(&policy, &snap, &[], &ClipConfig::default()),
            Err(Error::EmptyBatch)
        );
        let bad = RolloutGroup::with_advantages(vec![traj(&[0], &[3])], vec![1.0]).unwrap();
        assert!(matches!(
            surrogate_gradient(&policy, &snap, &[bad], &ClipConfig::default()),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn clip_config_serde_accepts_off() {
        let clip: ClipConfig = toml::from_str("eps_low = 0.2\neps_high = \"off\"").unwrap();
        assert!(clip.clip_high_off());
        let clip: ClipConfig = toml::from_str("eps_low = \"off\"\neps_high = 1").unwrap();
        assert_eq!(clip.eps_low, CLIP_LOW_OFF);
        assert_eq!(clip.eps_high, 1.0);
        let text = toml::to_string(&ClipConfig::new(0.2, CLIP_HIGH_OFF).unwrap()).unwrap();
        let back: ClipConfig = toml::from_str(&text).unwrap();
        assert!(back.clip_high_off());
        assert!(toml::from_str::<ClipConfig>("eps_low = 0.2\neps_high = 0.2\nextra = 1").is_err());
    }
}
