//! Exact expected full-batch PG and NPG updates under the symmetric
//! random-advantage law.
//!
//! Both updates only see clip events: with `h = 1_X - 1_Y` per state and
//! `delta = mu * nu * eta * d_old(s)`,
//!
//! ```text
//! PG:  theta[s, a] += delta * pi(a|s) * (h(a) - E_pi h)
//! NPG: pi'(a|s) = pi(a|s) * exp(delta * h(a)) / Z,  Z = e^delta p + e^-delta q + 1 - p - q
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::VisitationMeasure;
use crate::error::{Error, Result};
use crate::objective::{events_from_ratios, ClipConfig, ClipEventReport};
use crate::policy::{PolicySnapshot, PolicyTable, StateActionMatrix};
use crate::reward::AdvantageModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Updater {
    Pg,
    Npg,
}

impl Updater {
    pub fn apply(
        self,
        policy: &PolicyTable,
        snapshot: &PolicySnapshot,
        model: &AdvantageModel,
        clip: &ClipConfig,
        eta: f64,
        visitation: &VisitationMeasure,
    ) -> Result<PolicyTable> {
        match self {
            Updater::Pg => pg_step(policy, snapshot, model, clip, eta, visitation),
            Updater::Npg => npg_step(policy, snapshot, model, clip, eta, visitation),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Updater::Pg => "pg",
            Updater::Npg => "npg",
        }
    }
}

fn check_inputs(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    model: &AdvantageModel,
    clip: &ClipConfig,
    eta: f64,
    visitation: &VisitationMeasure,
) -> Result<()> {
    policy.check_shape(snapshot)?;
    model.validate()?;
    clip.validate()?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "eta = {eta} must be finite and nonnegative"
        )));
    }
    if visitation.mass.len() != policy.state_count() {
        return Err(Error::SpecMismatch(format!(
            "visitation covers {} states, policy has {}",
            visitation.mass.len(),
            policy.state_count()
        )));
    }
    Ok(())
}

/// Clip events at every state, masses under `policy`.
pub fn all_clip_events(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    clip: &ClipConfig,
) -> Result<Vec<ClipEventReport>> {
    policy.check_shape(snapshot)?;
    (0..policy.state_count())
        .map(|s| {
            let probs = policy.softmax_probs(s)?;
            let ratios = policy.ratios(snapshot, s)?;
            Ok(events_from_ratios(
                s,
                &probs,
                snapshot.row(s),
                &ratios,
                clip,
            ))
        })
        .collect()
}

/// The logit change applied by [`pg_step`].
pub fn pg_logit_delta(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    model: &AdvantageModel,
    clip: &ClipConfig,
    eta: f64,
    visitation: &VisitationMeasure,
) -> Result<StateActionMatrix> {
    check_inputs(policy, snapshot, model, clip, eta, visitation)?;
    let mut delta = StateActionMatrix::zeros(policy.state_count(), policy.action_count());
    for report in all_clip_events(policy, snapshot, clip)? {
        if report.is_empty() {
            continue;
        }
        let s = report.state;
        let probs = policy.softmax_probs(s)?;
        let scale = model.strength() * eta * visitation.get(s);
        let mean_h: f64 = probs.iter().zip(&report.h).map(|(p, h)| p * h).sum();
        for (a, d) in delta.row_mut(s).iter_mut().enumerate() {
            *d = scale * probs[a] * (report.h[a] - mean_h);
        }
    }
    Ok(delta)
}

pub fn pg_step(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    model: &AdvantageModel,
    clip: &ClipConfig,
    eta: f64,
    visitation: &VisitationMeasure,
) -> Result<PolicyTable> {
    let delta = pg_logit_delta(policy, snapshot, model, clip, eta, visitation)?;
    let mut next = policy.clone();
    next.logits_mut().add_scaled(&delta, 1.0);
    Ok(next)
}

pub fn npg_step(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    model: &AdvantageModel,
    clip: &ClipConfig,
    eta: f64,
    visitation: &VisitationMeasure,
) -> Result<PolicyTable> {
    check_inputs(policy, snapshot, model, clip, eta, visitation)?;
    let mut next = policy.clone();
    for report in all_clip_events(policy, snapshot, clip)? {
        if report.is_empty() {
            continue;
        }
        let s = report.state;
        let delta = model.strength() * eta * visitation.get(s);
        let z = delta.exp() * report.p + (-delta).exp() * report.q + (1.0 - report.p - report.q);
        let log_z = z.ln();
        let log_probs = policy.log_probs(s)?;
        for (a, theta) in next.logits_mut().row_mut(s).iter_mut().enumerate() {
            *theta = log_probs[a] + delta * report.h[a] - log_z;
        }
    }
    Ok(next)
}

/// Finite-sample jitter applied to the snapshot of idealized runs.
///
/// At a clean snapshot every ratio is 1, no clip event can fire and the
/// idealized updates are stationary. A snapshot taken from `samples` draws
/// per state would deviate from the live policy by roughly the multinomial
/// standard error, so each snapshot logit is perturbed by
/// `min(sqrt((1 - pi) / (samples * pi)), max_log_std) * N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotNoise {
    pub samples: f64,
    #[serde(default = "default_max_log_std")]
    pub max_log_std: f64,
}

fn default_max_log_std() -> f64 {
    2.0
}

impl Default for SnapshotNoise {
    fn default() -> Self {
        Self {
            samples: 400.0,
            max_log_std: default_max_log_std(),
        }
    }
}

impl SnapshotNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.samples > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "snapshot noise samples = {} must be positive",
                self.samples
            )));
        }
        if !(self.max_log_std >= 0.0 && self.max_log_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "max_log_std = {} must be finite and nonnegative",
                self.max_log_std
            )));
        }
        Ok(())
    }

    /// Jittered snapshot of `policy`. `samples = inf` gives the clean snapshot.
    pub fn snapshot<R: Rng + ?Sized>(
        &self,
        policy: &PolicyTable,
        rng: &mut R,
    ) -> Result<PolicySnapshot> {
        self.validate()?;
        let mut logits = StateActionMatrix::zeros(policy.state_count(), policy.action_count());
        for s in 0..policy.state_count() {
            let probs = policy.softmax_probs(s)?;
            let log_probs = policy.log_probs(s)?;
            for (a, out) in logits.row_mut(s).iter_mut().enumerate() {
                let std = ((1.0 - probs[a]) / (self.samples * probs[a]))
                    .sqrt()
                    .min(self.max_log_std);
                let z: f64 = rng.sample(StandardNormal);
                *out = log_probs[a] + std * z;
            }
        }
        Ok(PolicySnapshot::from_logits(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn row_policy(probs: &[f64]) -> PolicyTable {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        PolicyTable::from_logits(StateActionMatrix::from_vec(1, probs.len(), logits).unwrap())
            .unwrap()
    }

    fn row_snapshot(probs: &[f64]) -> PolicySnapshot {
        PolicySnapshot::from_probs(
            StateActionMatrix::from_vec(1, probs.len(), probs.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn unit_visitation() -> VisitationMeasure {
        VisitationMeasure { mass: vec![1.0] }
    }

    #[test]
    fn no_events_no_change() {
        let policy = row_policy(&[0.2, 0.3, 0.5]);
        let snap = policy.snapshot();
        let model = AdvantageModel::default();
        let clip = ClipConfig::default();
        for updater in [Updater::Pg, Updater::Npg] {
            let next = updater
                .apply(&policy, &snap, &model, &clip, 1.0, &unit_visitation())
                .unwrap();
            assert_eq!(next, policy);
        }
    }

    #[test]
    fn npg_preserves_simplex_and_raises_minority_mass() {
        // ratios 0.5 and ~1.21 against the snapshot
        let policy = row_policy(&[0.3, 0.7]);
        let snap = row_snapshot(&[0.6, 0.4]);
        let model = AdvantageModel::new(0.5, 1.0).unwrap();
        let next = npg_step(
            &policy,
            &snap,
            &model,
            &ClipConfig::default(),
            0.2,
            &unit_visitation(),
        )
        .unwrap();
        let probs = next.softmax_probs(0).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(probs[0] > 0.3);
        assert!(next.state_entropy(0).unwrap() > policy.state_entropy(0).unwrap());
    }

    #[test]
    fn shape_and_eta_validation() {
        let policy = row_policy(&[0.5, 0.5]);
        let snap = policy.snapshot();
        let bad = VisitationMeasure {
            mass: vec![1.0, 1.0],
        };
        let model = AdvantageModel::default();
        assert!(pg_step(&policy, &snap, &model, &ClipConfig::default(), 1.0, &bad).is_err());
        assert!(pg_step(
            &policy,
            &snap,
            &model,
            &ClipConfig::default(),
            f64::NAN,
            &unit_visitation()
        )
        .is_err());
    }

    #[test]
    fn jitter_is_reproducible_and_shrinks_with_samples() {
        let mut r = rng::stream(5);
        let policy = PolicyTable::random(20, 6, 1.0, &mut r);
        let a = SnapshotNoise::default()
            .snapshot(&policy, &mut rng::stream(9))
            .unwrap();
        let b = SnapshotNoise::default()
            .snapshot(&policy, &mut rng::stream(9))
            .unwrap();
        assert_eq!(a, b);

        let spread = |samples: f64| {
            let noise = SnapshotNoise {
                samples,
                max_log_std: 2.0,
            };
            let snap = noise.snapshot(&policy, &mut rng::stream(1)).unwrap();
            (0..20)
                .flat_map(|s| policy.ratios(&snap, s).unwrap())
                .map(|r| r.ln().abs())
                .fold(0.0, f64::max)
        };
        assert!(spread(1e6) < spread(100.0));
        assert!(spread(f64::INFINITY) < 1e-12);
    }
}
