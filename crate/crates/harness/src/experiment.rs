//! Run loop, CSV artifacts, evaluation and clip ablations.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clipbias_core::env::{rollout_from, visitation_exact};
use clipbias_core::rng::{lane_stream, Stream};
use clipbias_core::theory::weighted_entropy_change;
use clipbias_core::trainer::batch_entropy_estimate;
use clipbias_core::{
    ClipConfig, Error as CoreError, GrpoTrainer, PolicySnapshot, PolicyTable, RewardSource,
    TheoryStepReport, Trajectory, TreeIndex, VisitationMeasure,
};
use rayon::prelude::*;

use crate::config::{RunConfig, UpdaterChoice};
use crate::error::{HarnessError, Result};

pub const STEPS_HEADER: [&str; 7] = [
    "step",
    "entropy_est",
    "clip_frac_low",
    "clip_frac_high",
    "surrogate",
    "grad_norm",
    "reward_mean",
];
pub const THEORY_HEADER: [&str; 10] = [
    "step",
    "d_weighted_H",
    "dH_actual",
    "dH_pred",
    "p_mean",
    "q_mean",
    "qcond_low",
    "qcond_high",
    "logcond_low",
    "logcond_high",
];
pub const EVAL_HEADER: [&str; 3] = ["step", "mean_at_k", "pass_at_k"];
pub const CONDITIONS_HEADER: [&str; 11] = [
    "step",
    "state",
    "d",
    "p",
    "q",
    "p_old",
    "q_old",
    "qcond_low",
    "qcond_high",
    "logcond_low",
    "logcond_high",
];
pub const ABLATION_HEADER: [&str; 6] = [
    "eps_low",
    "eps_high",
    "initial_entropy",
    "final_entropy",
    "final_pass_at_k",
    "final_mean_at_k",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub step: usize,
    pub mean_at_k: f64,
    pub pass_at_k: f64,
    pub batch_entropy: f64,
}

/// Draw `k` responses per listed prompt and score them against a verifiable
/// source.
pub fn evaluate_pass_mean(
    policy: &PolicyTable,
    index: &TreeIndex,
    source: &RewardSource,
    k: usize,
    prompts: &[usize],
    rng: &mut Stream,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(HarnessError::Config("k must be positive".into()));
    }
    if !source.is_verifiable() {
        return Err(HarnessError::Config(
            "pass@k needs a verifiable reward".into(),
        ));
    }
    if prompts.is_empty() {
        return Err(CoreError::EmptyBatch.into());
    }
    let mut passed = 0usize;
    let mut correct = 0usize;
    let mut samples: Vec<Trajectory> = Vec::with_capacity(k * prompts.len());
    for &prompt in prompts {
        let mut any = false;
        for _ in 0..k {
            let traj = rollout_from(policy, index, prompt, rng)?;
            if source.is_correct(prompt, &traj.tokens) {
                correct += 1;
                any = true;
            }
            samples.push(traj);
        }
        passed += any as usize;
    }
    Ok(EvalReport {
        step: 0,
        mean_at_k: correct as f64 / (k * prompts.len()) as f64,
        pass_at_k: passed as f64 / prompts.len() as f64,
        batch_entropy: batch_entropy_estimate(policy, &samples)?,
    })
}

/// `sum_s d^pi(s) H(s) / T` under the policy's own visitation: the quantity
/// the batch entropy estimate targets.
pub fn aggregate_entropy(policy: &PolicyTable, index: &TreeIndex) -> Result<f64> {
    let d = visitation_exact(policy, index)?;
    let mut total = 0.0;
    for s in 0..policy.state_count() {
        total += d.get(s) * policy.state_entropy(s)?;
    }
    Ok(total / index.horizon() as f64)
}

/// Counts behind the four sign conditions on clip-event statistics, in the
/// order `E[Q]-E[Q|X]`, `E[Q]-E[Q|Y]`, `E[-log pi|X]-H`, `E[-log pi|Y]-H`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConditionTally {
    pub defined: [usize; 4],
    pub nonnegative: [usize; 4],
}

impl ConditionTally {
    fn record(&mut self, values: [Option<f64>; 4]) {
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                self.defined[i] += 1;
                self.nonnegative[i] += (*v >= 0.0) as usize;
            }
        }
    }

    pub fn merge(&mut self, other: &ConditionTally) {
        for i in 0..4 {
            self.defined[i] += other.defined[i];
            self.nonnegative[i] += other.nonnegative[i];
        }
    }

    /// Fraction of defined records that are nonnegative; `None` when there are
    /// no defined records.
    pub fn fractions(&self) -> [Option<f64>; 4] {
        std::array::from_fn(|i| {
            (self.defined[i] > 0).then(|| self.nonnegative[i] as f64 / self.defined[i] as f64)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: Option<PathBuf>,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub final_eval: Option<EvalReport>,
    pub conditions: ConditionTally,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

type Sink = csv::Writer<Box<dyn Write>>;

struct Artifacts {
    steps: Sink,
    theory: Sink,
    eval: Sink,
    conditions: Sink,
}

impl Artifacts {
    /// CSV writers in `dir`, or discarding writers when `dir` is `None`.
    fn create(dir: Option<&Path>) -> Result<Self> {
        if let Some(dir) = dir {
            fs::create_dir_all(dir)?;
        }
        let open = |name: &str, header: &[&str]| -> Result<Sink> {
            let target: Box<dyn Write> = match dir {
                Some(dir) => Box::new(io::BufWriter::new(fs::File::create(dir.join(name))?)),
                None => Box::new(io::sink()),
            };
            let mut w = csv::Writer::from_writer(target);
            w.write_record(header)?;
            Ok(w)
        };
        Ok(Self {
            steps: open("steps.csv", &STEPS_HEADER)?,
            theory: open("theory.csv", &THEORY_HEADER)?,
            eval: open("eval.csv", &EVAL_HEADER)?,
            conditions: open("conditions.csv", &CONDITIONS_HEADER)?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.theory.flush()?;
        self.eval.flush()?;
        self.conditions.flush()?;
        Ok(())
    }

    fn theory_row(
        &mut self,
        step: usize,
        entropy: f64,
        actual: Option<f64>,
        predicted: Option<f64>,
        report: &TheoryStepReport,
    ) -> Result<()> {
        self.theory.write_record([
            step.to_string(),
            fmt_f(entropy),
            fmt_opt(actual),
            fmt_opt(predicted),
            fmt_f(report.p_mean),
            fmt_f(report.q_mean),
            fmt_opt(report.q_cond_low_mean()),
            fmt_opt(report.q_cond_high_mean()),
            fmt_opt(report.log_cond_low_mean()),
            fmt_opt(report.log_cond_high_mean()),
        ])?;
        Ok(())
    }

    fn condition_rows(
        &mut self,
        step: usize,
        report: &TheoryStepReport,
        tally: &mut ConditionTally,
    ) -> Result<()> {
        for t in report.states.iter().filter(|t| t.p > 0.0 || t.q > 0.0) {
            let values = [
                t.q_cond_low(),
                t.q_cond_high(),
                t.log_cond_low(),
                t.log_cond_high(),
            ];
            tally.record(values);
            self.conditions.write_record([
                step.to_string(),
                t.state.to_string(),
                fmt_f(t.d),
                fmt_f(t.p),
                fmt_f(t.q),
                fmt_f(t.p_old),
                fmt_f(t.q_old),
                fmt_opt(values[0]),
                fmt_opt(values[1]),
                fmt_opt(values[2]),
                fmt_opt(values[3]),
            ])?;
        }
        Ok(())
    }

    fn eval_row(&mut self, report: &EvalReport) -> Result<()> {
        self.eval.write_record([
            report.step.to_string(),
            fmt_f(report.mean_at_k),
            fmt_f(report.pass_at_k),
        ])?;
        Ok(())
    }
}

struct Evaluator<'a> {
    cfg: &'a RunConfig,
    index: &'a TreeIndex,
    prompts: Vec<usize>,
    rng: Stream,
}

impl<'a> Evaluator<'a> {
    fn new(cfg: &'a RunConfig, index: &'a TreeIndex) -> Self {
        let prompts = (0..cfg.eval.repeats)
            .flat_map(|_| 0..cfg.tree.prompt_count)
            .collect();
        Self {
            cfg,
            index,
            prompts,
            rng: lane_stream(cfg.seed, 3),
        }
    }

    fn due(&self, step: usize) -> bool {
        self.cfg.reward.is_verifiable()
            && (step.is_multiple_of(self.cfg.eval.interval) || step == self.cfg.steps)
    }

    fn run(&mut self, policy: &PolicyTable, step: usize) -> Result<EvalReport> {
        let mut report = evaluate_pass_mean(
            policy,
            self.index,
            &self.cfg.reward,
            self.cfg.eval.k,
            &self.prompts,
            &mut self.rng,
        )?;
        report.step = step;
        Ok(report)
    }
}

fn check_finite(value: f64, what: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CoreError::NonFinite { what, step }.into())
    }
}

/// Expected surrogate under the two-point advantage law, per token.
fn idealized_surrogate(
    policy: &PolicyTable,
    snapshot: &PolicySnapshot,
    d_old: &VisitationMeasure,
    cfg: &RunConfig,
    horizon: usize,
) -> Result<f64> {
    let (nu, mu) = (cfg.advantage.nu, cfg.advantage.mu);
    let mut total = 0.0;
    for s in 0..policy.state_count() {
        let d = d_old.get(s);
        if d == 0.0 {
            continue;
        }
        let ratios = policy.ratios(snapshot, s)?;
        let old = snapshot.row(s);
        let per_state: f64 = ratios
            .iter()
            .zip(old)
            .map(|(&r, &po)| po * nu * (cfg.clip.term(r, mu).0 + cfg.clip.term(r, -mu).0))
            .sum();
        total += d * per_state;
    }
    Ok(total / horizon as f64)
}

/// Event masses of `pi_old`, as expected per-token clip fractions.
fn idealized_clip_fractions(report: &TheoryStepReport, horizon: usize) -> (f64, f64) {
    let low: f64 = report.states.iter().map(|t| t.d * t.p_old).sum();
    let high: f64 = report.states.iter().map(|t| t.d * t.q_old).sum();
    (low / horizon as f64, high / horizon as f64)
}

fn update_norm(before: &PolicyTable, after: &PolicyTable, eta: f64) -> Result<f64> {
    let mut sq = 0.0;
    for s in 0..before.state_count() {
        let a = before.log_probs(s)?;
        let b = after.log_probs(s)?;
        sq += a
            .iter()
            .zip(&b)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>();
    }
    Ok(sq.sqrt() / eta)
}

/// Execute one configured run, writing its artifacts into `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    run(cfg, Some(out))
}

/// Execute a run without writing artifacts.
pub fn run_in_memory(cfg: &RunConfig) -> Result<RunSummary> {
    run(cfg, None)
}

fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.tree.spec()?;
    let index = TreeIndex::new(&spec)?;
    let mut artifacts = Artifacts::create(out)?;
    if let Some(out) = out {
        fs::write(out.join("config.resolved"), cfg.to_toml())?;
    }

    let mut policy = PolicyTable::random(
        index.state_count(),
        spec.vocab_size,
        cfg.init.logit_std,
        &mut lane_stream(cfg.seed, 0),
    );
    let initial_entropy = aggregate_entropy(&policy, &index)?;
    let mut evaluator = Evaluator::new(cfg, &index);
    let mut final_eval = None;
    let mut tally = ConditionTally::default();

    if evaluator.due(0) {
        let report = evaluator.run(&policy, 0)?;
        artifacts.eval_row(&report)?;
        final_eval = Some(report);
    }

    match cfg.updater.idealized() {
        Some(updater) => {
            let mut noise_rng = lane_stream(cfg.seed, 1);
            let refresh = cfg.refresh_period();
            let horizon = index.horizon();
            let mut snapshot = policy.snapshot();
            let mut d_old = visitation_exact(&snapshot, &index)?;
            for step in 0..cfg.steps {
                if step % refresh == 0 {
                    snapshot = cfg.snapshot_noise.snapshot(&policy, &mut noise_rng)?;
                    d_old = visitation_exact(&snapshot, &index)?;
                }
                let entropy = check_finite(aggregate_entropy(&policy, &index)?, "entropy", step)?;
                let report = TheoryStepReport::build(
                    &policy,
                    &snapshot,
                    &cfg.advantage,
                    &cfg.clip,
                    cfg.eta,
                    &d_old,
                )?;
                let surrogate = idealized_surrogate(&policy, &snapshot, &d_old, cfg, horizon)?;
                let next = updater.apply(
                    &policy,
                    &snapshot,
                    &cfg.advantage,
                    &cfg.clip,
                    cfg.eta,
                    &d_old,
                )?;
                let actual = check_finite(
                    weighted_entropy_change(&policy, &next, &d_old)?,
                    "entropy change",
                    step,
                )?;
                let (low, high) = idealized_clip_fractions(&report, horizon);
                artifacts.steps.write_record([
                    step.to_string(),
                    fmt_f(entropy),
                    fmt_f(low),
                    fmt_f(high),
                    fmt_f(surrogate),
                    fmt_f(update_norm(&policy, &next, cfg.eta)?),
                    String::new(),
                ])?;
                artifacts.theory_row(
                    step,
                    entropy,
                    Some(actual),
                    Some(report.predicted(updater)),
                    &report,
                )?;
                artifacts.condition_rows(step, &report, &mut tally)?;
                policy = next;
                if evaluator.due(step + 1) {
                    let report = evaluator.run(&policy, step + 1)?;
                    artifacts.eval_row(&report)?;
                    final_eval = Some(report);
                }
            }
        }
        None => {
            debug_assert_eq!(cfg.updater, UpdaterChoice::GrpoSgd);
            let mut trainer =
                GrpoTrainer::new(&spec, cfg.reward.clone(), cfg.clip, cfg.optimizer.clone())?;
            let mut train_rng = lane_stream(cfg.seed, 2);
            for step in 0..cfg.steps {
                let entropy = check_finite(aggregate_entropy(&policy, &index)?, "entropy", step)?;
                let epoch = trainer.train_epoch(&mut policy, &mut train_rng)?;
                for log in &epoch.logs {
                    artifacts.steps.write_record([
                        log.step.to_string(),
                        fmt_f(log.entropy_est),
                        fmt_f(log.clip_frac_low),
                        fmt_f(log.clip_frac_high),
                        fmt_f(log.surrogate),
                        fmt_f(log.grad_norm),
                        fmt_f(log.reward_mean),
                    ])?;
                }
                let d_old = visitation_exact(&epoch.snapshot, &index)?;
                let report = TheoryStepReport::build(
                    &policy,
                    &epoch.snapshot,
                    &cfg.advantage,
                    &cfg.clip,
                    0.0,
                    &d_old,
                )?;
                artifacts.theory_row(step, entropy, None, None, &report)?;
                artifacts.condition_rows(step, &report, &mut tally)?;
                if evaluator.due(step + 1) {
                    let report = evaluator.run(&policy, step + 1)?;
                    artifacts.eval_row(&report)?;
                    final_eval = Some(report);
                }
            }
        }
    }

    let final_entropy = check_finite(aggregate_entropy(&policy, &index)?, "entropy", cfg.steps)?;
    artifacts.flush()?;
    Ok(RunSummary {
        dir: out.map(Path::to_path_buf),
        initial_entropy,
        final_entropy,
        final_eval,
        conditions: tally,
    })
}

fn eps_label(v: f64) -> String {
    if v.is_infinite() {
        "off".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub clip: ClipConfig,
    pub summary: RunSummary,
}

/// Run every `(eps_low, eps_high)` cell of the grid in parallel, one run
/// directory per cell, and summarise them in `ablation.csv`.
pub fn ablate_clipping(
    base: &RunConfig,
    eps_low: &[f64],
    eps_high: &[f64],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if eps_low.is_empty() || eps_high.is_empty() {
        return Err(HarnessError::Config(
            "ablation grid needs nonempty epsilon lists".into(),
        ));
    }
    let cells: Vec<ClipConfig> = eps_low
        .iter()
        .flat_map(|&lo| eps_high.iter().map(move |&hi| (lo, hi)))
        .map(|(lo, hi)| ClipConfig::new(lo, hi).map_err(HarnessError::from))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|clip| {
            let mut cfg = base.clone();
            cfg.clip = *clip;
            let dir = out.join(format!(
                "low_{}__high_{}",
                eps_label(clip.eps_low),
                eps_label(clip.eps_high)
            ));
            run_experiment(&cfg, &dir).map(|summary| AblationRow {
                clip: *clip,
                summary,
            })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(ABLATION_HEADER)?;
    for row in &rows {
        let eval = row.summary.final_eval;
        w.write_record([
            eps_label(row.clip.eps_low),
            eps_label(row.clip.eps_high),
            fmt_f(row.summary.initial_entropy),
            fmt_f(row.summary.final_entropy),
            fmt_opt(eval.map(|e| e.pass_at_k)),
            fmt_opt(eval.map(|e| e.mean_at_k)),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
