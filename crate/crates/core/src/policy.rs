//! Tabular softmax policies over enumerated states.
//!
//! Logits live in natural-log space; every softmax subtracts the row maximum
//! first. Entropies are in nats.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are treated as zero in `p log p` and rejected as
/// ratio denominators.
pub const PROB_FLOOR: f64 = 1e-300;

/// Dense row-major matrix indexed `(state, action)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateActionMatrix {
    state_count: usize,
    action_count: usize,
    values: Vec<f64>,
}

impl StateActionMatrix {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        Self {
            state_count,
            action_count,
            values: vec![0.0; state_count * action_count],
        }
    }

    pub fn from_vec(state_count: usize, action_count: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != state_count * action_count {
            return Err(Error::SpecMismatch(format!(
                "{} values for a {state_count}x{action_count} matrix",
                values.len()
            )));
        }
        Ok(Self {
            state_count,
            action_count,
            values,
        })
    }

    #[inline]
    pub fn state_count(&self) -> usize {
        self.state_count
    }

    #[inline]
    pub fn action_count(&self) -> usize {
        self.action_count
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[f64] {
        let start = state * self.action_count;
        &self.values[start..start + self.action_count]
    }

    #[inline]
    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        let start = state * self.action_count;
        &mut self.values[start..start + self.action_count]
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.action_count + action]
    }

    #[inline]
    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.action_count + action] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.action_count.max(1))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &StateActionMatrix, scale: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state < self.state_count {
            Ok(())
        } else {
            Err(Error::StateOutOfRange {
                state,
                state_count: self.state_count,
            })
        }
    }
}

/// Read access to per-state action distributions, shared by live policies and
/// frozen snapshots.
pub trait TabularPolicy {
    fn state_count(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Action distribution at `state`. Callers guarantee `state` is in range.
    fn probs(&self, state: usize) -> Cow<'_, [f64]>;
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `log softmax` of one logit row, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p >= PROB_FLOOR)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Gradient of the entropy of `softmax(theta)` with respect to `theta`, given
/// the probabilities: `-pi_a (log pi_a - E_pi[log pi])`.
pub fn entropy_logit_gradient(probs: &[f64]) -> Vec<f64> {
    let log_p: Vec<f64> = probs
        .iter()
        .map(|&p| if p >= PROB_FLOOR { p.ln() } else { 0.0 })
        .collect();
    let mean_log: f64 = probs.iter().zip(&log_p).map(|(p, l)| p * l).sum();
    probs
        .iter()
        .zip(&log_p)
        .map(|(&p, &l)| {
            if p >= PROB_FLOOR {
                -p * (l - mean_log)
            } else {
                0.0
            }
        })
        .collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = a;
        }
        acc += p;
        if u < acc {
            return a;
        }
    }
    // u landed in the rounding gap above the accumulated mass.
    last_positive
}

/// Tabular softmax policy `pi(a|s) = exp(theta[s,a]) / sum_a' exp(theta[s,a'])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    logits: StateActionMatrix,
}

impl PolicyTable {
    /// Uniform policy (all logits zero).
    pub fn uniform(state_count: usize, action_count: usize) -> Self {
        Self {
            logits: StateActionMatrix::zeros(state_count, action_count),
        }
    }

    pub fn from_logits(logits: StateActionMatrix) -> Result<Self> {
        if logits.state_count() == 0 || logits.action_count() == 0 {
            return Err(Error::InvalidParameter(
                "policy needs at least one state and one action".into(),
            ));
        }
        if !logits.is_finite() {
            return Err(Error::InvalidParameter("non-finite logits".into()));
        }
        Ok(Self { logits })
    }

    /// Logits drawn i.i.d. from `N(0, std^2)`.
    pub fn random<R: Rng + ?Sized>(
        state_count: usize,
        action_count: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let values = (0..state_count * action_count)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            logits: StateActionMatrix {
                state_count,
                action_count,
                values,
            },
        }
    }

    #[inline]
    pub fn state_count(&self) -> usize {
        self.logits.state_count()
    }

    #[inline]
    pub fn action_count(&self) -> usize {
        self.logits.action_count()
    }

    pub fn logits(&self) -> &StateActionMatrix {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut StateActionMatrix {
        &mut self.logits
    }

    pub fn softmax_probs(&self, state: usize) -> Result<Vec<f64>> {
        self.logits.check_state(state)?;
        Ok(softmax(self.logits.row(state)))
    }

    pub fn log_probs(&self, state: usize) -> Result<Vec<f64>> {
        self.logits.check_state(state)?;
        Ok(log_softmax(self.logits.row(state)))
    }

    pub fn state_entropy(&self, state: usize) -> Result<f64> {
        Ok(entropy(&self.softmax_probs(state)?))
    }

    /// Row `state` of the entropy gradient; all other rows are zero.
    pub fn state_entropy_gradient(&self, state: usize) -> Result<Vec<f64>> {
        Ok(entropy_logit_gradient(&self.softmax_probs(state)?))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Result<usize> {
        Ok(sample_from(&self.softmax_probs(state)?, rng))
    }

    /// Importance ratio `pi(a|s) / pi_old(a|s)`.
    pub fn ratio(&self, snapshot: &PolicySnapshot, state: usize, action: usize) -> Result<f64> {
        self.check_shape(snapshot)?;
        let probs = self.softmax_probs(state)?;
        let p = *probs.get(action).ok_or(Error::ActionOutOfRange {
            action,
            action_count: self.action_count(),
        })?;
        Ok(p / snapshot.checked_prob(state, action)?)
    }

    /// Ratios for every action at `state`.
    pub fn ratios(&self, snapshot: &PolicySnapshot, state: usize) -> Result<Vec<f64>> {
        self.check_shape(snapshot)?;
        let probs = self.softmax_probs(state)?;
        probs
            .iter()
            .enumerate()
            .map(|(a, p)| Ok(p / snapshot.checked_prob(state, a)?))
            .collect()
    }

    /// All probabilities as a matrix.
    pub fn probabilities(&self) -> StateActionMatrix {
        let mut out = StateActionMatrix::zeros(self.state_count(), self.action_count());
        for s in 0..self.state_count() {
            out.row_mut(s).copy_from_slice(&softmax(self.logits.row(s)));
        }
        out
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            probs: self.probabilities(),
        }
    }

    pub(crate) fn check_shape(&self, snapshot: &PolicySnapshot) -> Result<()> {
        if snapshot.state_count() != self.state_count()
            || snapshot.action_count() != self.action_count()
        {
            return Err(Error::SpecMismatch(format!(
                "policy is {}x{} but snapshot is {}x{}",
                self.state_count(),
                self.action_count(),
                snapshot.state_count(),
                snapshot.action_count()
            )));
        }
        Ok(())
    }
}

impl TabularPolicy for PolicyTable {
    fn state_count(&self) -> usize {
        self.logits.state_count()
    }

    fn action_count(&self) -> usize {
        self.logits.action_count()
    }

    fn probs(&self, state: usize) -> Cow<'_, [f64]> {
        Cow::Owned(softmax(self.logits.row(state)))
    }
}

/// Frozen action probabilities of the behaviour policy `pi_old`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    probs: StateActionMatrix,
}

impl PolicySnapshot {
    /// Build from explicit probabilities; every row must be a distribution.
    pub fn from_probs(probs: StateActionMatrix) -> Result<Self> {
        for (s, row) in probs.rows().enumerate() {
            let total: f64 = row.iter().sum();
            if !((total - 1.0).abs() <= 1e-9) || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "snapshot row {s} is not a probability vector (sum {total})"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Snapshot of `softmax(logits)`.
    pub fn from_logits(logits: &StateActionMatrix) -> Self {
        let mut probs = StateActionMatrix::zeros(logits.state_count(), logits.action_count());
        for s in 0..logits.state_count() {
            probs.row_mut(s).copy_from_slice(&softmax(logits.row(s)));
        }
        Self { probs }
    }

    pub fn state_count(&self) -> usize {
        self.probs.state_count()
    }

    pub fn action_count(&self) -> usize {
        self.probs.action_count()
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs.get(state, action)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        self.probs.row(state)
    }

    pub fn matrix(&self) -> &StateActionMatrix {
        &self.probs
    }

    pub(crate) fn checked_prob(&self, state: usize, action: usize) -> Result<f64> {
        self.probs.check_state(state)?;
        if action >= self.action_count() {
            return Err(Error::ActionOutOfRange {
                action,
                action_count: self.action_count(),
            });
        }
        let p = self.probs.get(state, action);
        if p < PROB_FLOOR {
            return Err(Error::DegenerateSnapshot {
                state,
                action,
                prob: p,
            });
        }
        Ok(p)
    }
}

impl TabularPolicy for PolicySnapshot {
    fn state_count(&self) -> usize {
        self.probs.state_count()
    }

    fn action_count(&self) -> usize {
        self.probs.action_count()
    }

    fn probs(&self, state: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.probs.row(state))
    }
}
