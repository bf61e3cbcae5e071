//! First-order entropy-change predictions for the idealized updates.
//!
//! With `Q(a) = pi(a) (log pi(a) + H)` and `delta = mu * nu * eta * d_old(s)`:
//!
//! ```text
//! PG:  dH(s) ~ delta * (p (E[Q] - E[Q|X]) - q (E[Q] - E[Q|Y]))
//! NPG: dH(s) ~ delta * (p (E[-log pi|X] - H) - q (E[-log pi|Y] - H))
//! ```
//!
//! Expectations are under the current policy. Aggregates over states are
//! `d_old`-weighted sums of per-state quantities, for predictions and
//! measured changes alike.

use crate::env::VisitationMeasure;
use crate::error::{Error, Result};
use crate::idealized::{all_clip_events, Updater};
use crate::objective::{ClipConfig, ClipEventReport};
use crate::policy::{entropy, PolicySnapshot, PolicyTable, PROB_FLOOR};
use crate::reward::AdvantageModel;

fn check_events(policy: &PolicyTable, events: &ClipEventReport, state: usize) -> Result<()> {
    if events.state != state {
        return Err(Error::InvalidParameter(format!(
            "events computed for state {} queried at state {state}",
            events.state
        )));
    }
    if events.h.len() != policy.action_count() {
        return Err(Error::SpecMismatch(format!(
            "events cover {} actions, policy has {}",
            events.h.len(),
            policy.action_count()
        )));
    }
    Ok(())
}

fn conditional(probs: &[f64], members: &[usize], values: &[f64]) -> Option<f64> {
    let mass: f64 = members.iter().map(|&a| probs[a]).sum();
    if members.is_empty() || mass <= 0.0 {
        return None;
    }
    Some(members.iter().map(|&a| probs[a] * values[a]).sum::<f64>() / mass)
}

/// `(E[Q], E[Q|X], E[Q|Y])` under the current policy.
pub fn q_statistics(
    policy: &PolicyTable,
    events: &ClipEventReport,
    state: usize,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    check_events(policy, events, state)?;
    let probs = policy.softmax_probs(state)?;
    let h = entropy(&probs);
    let q: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p < PROB_FLOOR {
                0.0
            } else {
                p * (p.ln() + h)
            }
        })
        .collect();
    let eq = probs.iter().zip(&q).map(|(p, v)| p * v).sum();
    Ok((
        eq,
        conditional(&probs, &events.low, &q),
        conditional(&probs, &events.high, &q),
    ))
}

/// `(E[-log pi|X], E[-log pi|Y], H)` under the current policy.
pub fn log_statistics(
    policy: &PolicyTable,
    events: &ClipEventReport,
    state: usize,
) -> Result<(Option<f64>, Option<f64>, f64)> {
    check_events(policy, events, state)?;
    let probs = policy.softmax_probs(state)?;
    let surprisal: Vec<f64> = policy.log_probs(state)?.iter().map(|l| -l).collect();
    Ok((
        conditional(&probs, &events.low, &surprisal),
        conditional(&probs, &events.high, &surprisal),
        entropy(&probs),
    ))
}

/// `m * (e - c)`, requiring `c` whenever `m > 0`.
fn bracket(mass: f64, centre: f64, cond: Option<f64>, what: &'static str) -> Result<f64> {
    if mass == 0.0 {
        return Ok(0.0);
    }
    match cond {
        Some(c) => Ok(mass * (centre - c)),
        None => Err(Error::UndefinedConditional(what)),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn predict_dh_pg(
    d: f64,
    p: f64,
    q: f64,
    eq: f64,
    eq_x: Option<f64>,
    eq_y: Option<f64>,
    model: &AdvantageModel,
    eta: f64,
) -> Result<f64> {
    let low = bracket(p, eq, eq_x, "E[Q|X]")?;
    let high = bracket(q, eq, eq_y, "E[Q|Y]")?;
    Ok(model.strength() * eta * d * (low - high))
}

#[allow(clippy::too_many_arguments)]
pub fn predict_dh_npg(
    d: f64,
    p: f64,
    q: f64,
    el_x: Option<f64>,
    el_y: Option<f64>,
    h: f64,
    model: &AdvantageModel,
    eta: f64,
) -> Result<f64> {
    // p (ELx - H) = -(p (H - ELx))
    let low = -bracket(p, h, el_x, "E[-log pi|X]")?;
    let high = -bracket(q, h, el_y, "E[-log pi|Y]")?;
    Ok(model.strength() * eta * d * (low - high))
}

/// Theory quantities at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTheory {
    pub state: usize,
    pub d: f64,
    pub p: f64,
    pub q: f64,
    pub p_old: f64,
    pub q_old: f64,
    pub eq: f64,
    pub eq_x: Option<f64>,
    pub eq_y: Option<f64>,
    pub el_x: Option<f64>,
    pub el_y: Option<f64>,
    pub h: f64,
    pub dh_pred_pg: f64,
    pub dh_pred_npg: f64,
}

impl StateTheory {
    /// `E[Q] - E[Q|X]`, defined only when X is nonempty.
    pub fn q_cond_low(&self) -> Option<f64> {
        self.eq_x.map(|c| self.eq - c)
    }

    pub fn q_cond_high(&self) -> Option<f64> {
        self.eq_y.map(|c| self.eq - c)
    }

    /// `E[-log pi|X] - H`.
    pub fn log_cond_low(&self) -> Option<f64> {
        self.el_x.map(|c| c - self.h)
    }

    pub fn log_cond_high(&self) -> Option<f64> {
        self.el_y.map(|c| c - self.h)
    }
}

/// Mean of the defined values, and how many there were.
fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| sum / n as f64), n)
}

/// Per-state theory quantities for one step, with aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryStepReport {
    pub states: Vec<StateTheory>,
    /// `sum_s d(s) H(s)`.
    pub d_weighted_h: f64,
    pub dh_pred_pg: f64,
    pub dh_pred_npg: f64,
    /// `d`-weighted clip masses.
    pub p_weighted: f64,
    pub q_weighted: f64,
    /// Plain means of the clip masses over states.
    pub p_mean: f64,
    pub q_mean: f64,
}

impl TheoryStepReport {
    pub fn build(
        policy: &PolicyTable,
        snapshot: &PolicySnapshot,
        model: &AdvantageModel,
        clip: &ClipConfig,
        eta: f64,
        visitation: &VisitationMeasure,
    ) -> Result<Self> {
        if visitation.mass.len() != policy.state_count() {
            return Err(Error::SpecMismatch(format!(
                "visitation covers {} states, policy has {}",
                visitation.mass.len(),
                policy.state_count()
            )));
        }
        let events = all_clip_events(policy, snapshot, clip)?;
        let mut states = Vec::with_capacity(events.len());
        for ev in &events {
            let s = ev.state;
            let d = visitation.get(s);
            let (eq, eq_x, eq_y) = q_statistics(policy, ev, s)?;
            let (el_x, el_y, h) = log_statistics(policy, ev, s)?;
            states.push(StateTheory {
                state: s,
                d,
                p: ev.p,
                q: ev.q,
                p_old: ev.p_old,
                q_old: ev.q_old,
                eq,
                eq_x,
                eq_y,
                el_x,
                el_y,
                h,
                dh_pred_pg: predict_dh_pg(d, ev.p, ev.q, eq, eq_x, eq_y, model, eta)?,
                dh_pred_npg: predict_dh_npg(d, ev.p, ev.q, el_x, el_y, h, model, eta)?,
            });
        }
        let n = states.len().max(1) as f64;
        Ok(Self {
            d_weighted_h: states.iter().map(|t| t.d * t.h).sum(),
            dh_pred_pg: states.iter().map(|t| t.d * t.dh_pred_pg).sum(),
            dh_pred_npg: states.iter().map(|t| t.d * t.dh_pred_npg).sum(),
            p_weighted: states.iter().map(|t| t.d * t.p).sum(),
            q_weighted: states.iter().map(|t| t.d * t.q).sum(),
            p_mean: states.iter().map(|t| t.p).sum::<f64>() / n,
            q_mean: states.iter().map(|t| t.q).sum::<f64>() / n,
            states,
        })
    }

    pub fn predicted(&self, updater: Updater) -> f64 {
        match updater {
            Updater::Pg => self.dh_pred_pg,
            Updater::Npg => self.dh_pred_npg,
        }
    }

    pub fn has_events(&self) -> bool {
        self.states.iter().any(|t| t.p > 0.0 || t.q > 0.0)
    }

    pub fn q_cond_low_mean(&self) -> Option<f64> {
        defined_mean(self.states.iter().map(StateTheory::q_cond_low)).0
    }

    pub fn q_cond_high_mean(&self) -> Option<f64> {
        defined_mean(self.states.iter().map(StateTheory::q_cond_high)).0
    }

    pub fn log_cond_low_mean(&self) -> Option<f64> {
        defined_mean(self.states.iter().map(StateTheory::log_cond_low)).0
    }

    pub fn log_cond_high_mean(&self) -> Option<f64> {
        defined_mean(self.states.iter().map(StateTheory::log_cond_high)).0
    }
}

/// `sum_s d(s) (H_after(s) - H_before(s))`.
pub fn weighted_entropy_change(
    before: &PolicyTable,
    after: &PolicyTable,
    visitation: &VisitationMeasure,
) -> Result<f64> {
    if before.state_count() != after.state_count() || visitation.mass.len() != before.state_count()
    {
        return Err(Error::SpecMismatch(
            "entropy change over mismatched tables".into(),
        ));
    }
    let mut total = 0.0;
    for s in 0..before.state_count() {
        let d = visitation.get(s);
        if d != 0.0 {
            total += d * (after.state_entropy(s)? - before.state_entropy(s)?);
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRow {
    pub eta: f64,
    pub actual: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualScan {
    pub updater: Updater,
    pub rows: Vec<ResidualRow>,
    /// Least-squares slope of `ln residual` against `ln eta`; `None` when the
    /// instance is vacuous or has fewer than two positive residuals.
    pub slope: Option<f64>,
    /// No clip event at any visited state: both deltas are zero.
    pub vacuous: bool,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn residual_scan(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    model: &AdvantageModel,
    clip: &ClipConfig,
    etas: &[f64],
    updater: Updater,
    visitation: &VisitationMeasure,
) -> Result<ResidualScan> {
    if etas.len() < 2 || etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidParameter(
            "residual scan needs at least two positive step sizes".into(),
        ));
    }
    let base = TheoryStepReport::build(policy, snapshot, model, clip, 1.0, visitation)?;
    let vacuous = !base
        .states
        .iter()
        .any(|t| t.d > 0.0 && (t.p > 0.0 || t.q > 0.0));
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let next = updater.apply(policy, snapshot, model, clip, eta, visitation)?;
        let actual = weighted_entropy_change(policy, &next, visitation)?;
        // predictions are linear in eta
        let predicted = base.predicted(updater) * eta;
        rows.push(ResidualRow {
            eta,
            actual,
            predicted,
            residual: (actual - predicted).abs(),
        });
    }
    let slope = if vacuous {
        None
    } else {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.residual > 0.0)
            .map(|r| (r.eta.ln(), r.residual.ln()))
            .collect();
        if points.len() == rows.len() {
            fit_slope(&points)
        } else {
            None
        }
    };
    Ok(ResidualScan {
        updater,
        rows,
        slope,
        vacuous,
    })
}
