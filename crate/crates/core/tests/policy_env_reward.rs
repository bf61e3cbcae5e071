//! Oracles for the softmax table, the token tree and the reward sources.

use clipbias_core::env::{rollout, rollout_from, visitation_exact, visitation_mc};
use clipbias_core::reward::{draw_reward, idealized_advantage};
use clipbias_core::rng::lane_stream;
use clipbias_core::{
    batch_entropy_estimate, group_advantages, reinforce_gradient, AdvantageModel, PolicyTable,
    RewardSource, RolloutGroup, StateActionMatrix, TreeIndex, TreeSpec,
};
use proptest::prelude::*;
use rand::Rng;

fn row(logits: &[f64]) -> PolicyTable {
    PolicyTable::from_logits(StateActionMatrix::from_vec(1, logits.len(), logits.to_vec()).unwrap())
        .unwrap()
}

#[test]
fn softmax_of_zero_and_ln2() {
    let p = row(&[0.0, 2f64.ln()]).softmax_probs(0).unwrap();
    assert!((p[0] - 1.0 / 3.0).abs() <= 1e-12);
    assert!((p[1] - 2.0 / 3.0).abs() <= 1e-12);
}

#[test]
fn entropy_of_0_1_2_matches_summation() {
    let e = [1.0f64, 1f64.exp(), 2f64.exp()];
    let z: f64 = e.iter().sum();
    let oracle: f64 = e.iter().map(|x| -(x / z) * (x / z).ln()).sum();
    assert!((row(&[0.0, 1.0, 2.0]).state_entropy(0).unwrap() - oracle).abs() <= 1e-12);
}

fn fd_entropy_gradient(logits: &[f64], step: f64) -> Vec<f64> {
    (0..logits.len())
        .map(|i| {
            let mut up = logits.to_vec();
            up[i] += step;
            let mut down = logits.to_vec();
            down[i] -= step;
            (row(&up).state_entropy(0).unwrap() - row(&down).state_entropy(0).unwrap())
                / (2.0 * step)
        })
        .collect()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let logits = [0.0, 1.0, 2.0];
    let g = row(&logits).state_entropy_gradient(0).unwrap();
    assert!(rel_error(&g, &fd_entropy_gradient(&logits, 1e-6)) <= 1e-6);

    let mut rng = lane_stream(2024, 0);
    for i in 0..100 {
        let n = 2 + i % 15;
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = row(&logits).state_entropy_gradient(0).unwrap();
        let err = rel_error(&g, &fd_entropy_gradient(&logits, 1e-6));
        assert!(err <= 1e-6, "dimension {n}: {err:e}");
        assert!(g.iter().sum::<f64>().abs() <= 1e-12);
    }
}

#[test]
fn importance_weights_average_to_one() {
    let mut rng = lane_stream(5, 0);
    let a = PolicyTable::random(10, 7, 1.5, &mut rng);
    let b = PolicyTable::random(10, 7, 1.5, &mut rng).snapshot();
    for s in 0..10 {
        let r = a.ratios(&b, s).unwrap();
        let total: f64 = b.row(s).iter().zip(&r).map(|(p, r)| p * r).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn exact_visitation_agrees_with_monte_carlo() {
    let index = TreeIndex::new(&TreeSpec::new(3, 3, 1)).unwrap();
    let mut rng = lane_stream(8, 0);
    let policy = PolicyTable::random(index.state_count(), 3, 1.0, &mut rng);
    let exact = visitation_exact(&policy, &index).unwrap();
    let n = 1_000_000;
    let mc = visitation_mc(&policy, &index, n, &mut rng).unwrap();
    for s in 0..index.state_count() {
        let d = exact.get(s);
        let sigma = (d * (1.0 - d) / n as f64).sqrt();
        assert!((mc.get(s) - d).abs() <= 4.0 * sigma.max(1e-12), "state {s}");
    }
    for total in exact.depth_totals(&index) {
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn rollout_logprobs_match_policy() {
    let index = TreeIndex::new(&TreeSpec::new(4, 3, 2)).unwrap();
    let mut rng = lane_stream(1, 0);
    let policy = PolicyTable::random(index.state_count(), 4, 1.0, &mut rng);
    for _ in 0..200 {
        let t = rollout(&policy, &index, &mut rng).unwrap();
        for ((&s, &a), &lp) in t.state_path.iter().zip(&t.tokens).zip(&t.old_logprobs) {
            assert!((policy.log_probs(s).unwrap()[a] - lp).abs() <= 1e-12);
        }
        for (depth, &s) in t.state_path.iter().enumerate() {
            assert_eq!(index.encode(t.prompt, &t.tokens[..depth]).unwrap(), s);
        }
    }
}

#[test]
fn bernoulli_and_gaussian_moments() {
    let index = TreeIndex::new(&TreeSpec::new(2, 1, 1)).unwrap();
    let policy = PolicyTable::uniform(index.state_count(), 2);
    let mut rng = lane_stream(3, 0);
    let traj = rollout(&policy, &index, &mut rng).unwrap();

    let n = 100_000;
    let mean = (0..n)
        .map(|_| draw_reward(&RewardSource::Bernoulli { p: 0.5 }, &traj, &mut rng))
        .sum::<f64>()
        / n as f64;
    assert!((mean - 0.5).abs() <= 4.0 * 0.5 / (n as f64).sqrt());

    let n = 1_000_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| draw_reward(&RewardSource::Gaussian, &traj, &mut rng))
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 4.0 / (n as f64).sqrt());
    assert!((var - 1.0).abs() <= 0.05);
}

#[test]
fn centering_matches_brute_force() {
    let mut rng = lane_stream(4, 0);
    for _ in 0..100 {
        let rewards: Vec<f64> = (0..8)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let mut total = 0.0;
        for r in &rewards {
            total += r;
        }
        let mean = total / 8.0;
        let oracle: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
        assert_eq!(group_advantages(&rewards).unwrap(), oracle);
    }
}

#[test]
fn large_groups_reproduce_half_half_law() {
    let mut rng = lane_stream(6, 0);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..2_000 {
        let rewards: Vec<f64> = (0..64)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        for a in group_advantages(&rewards).unwrap() {
            if a > 0.0 {
                sum += a;
                count += 1;
            }
        }
    }
    let conditional = sum / count as f64;
    assert!(
        (conditional - 0.5).abs() <= 0.05,
        "E[A | A > 0] = {conditional}"
    );
}

#[test]
fn idealized_law_frequencies() {
    let mut rng = lane_stream(7, 0);
    let n = 100_000;
    let model = AdvantageModel::new(0.25, 1.0).unwrap();
    let zeros = (0..n)
        .filter(|_| idealized_advantage(&model, &mut rng) == 0.0)
        .count();
    let sigma = (0.25f64 / n as f64).sqrt();
    assert!((zeros as f64 / n as f64 - 0.5).abs() <= 4.0 * sigma);
}

#[test]
fn random_rewards_are_uncorrelated_with_responses() {
    let index = TreeIndex::new(&TreeSpec::new(4, 3, 1)).unwrap();
    let mut rng = lane_stream(9, 0);
    let policy = PolicyTable::random(index.state_count(), 4, 1.0, &mut rng);
    let n = 100_000;
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let t = rollout(&policy, &index, &mut rng).unwrap();
        xs.push(t.tokens.iter().sum::<usize>() as f64);
        ys.push(draw_reward(
            &RewardSource::Bernoulli { p: 0.5 },
            &t,
            &mut rng,
        ));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let corr = cov / (vx * vy).sqrt();
    assert!(corr.abs() <= 4.0 / (n as f64).sqrt(), "correlation {corr}");
}

#[test]
fn reinforce_has_zero_mean_under_random_rewards() {
    let index = TreeIndex::new(&TreeSpec::new(3, 2, 1)).unwrap();
    let mut rng = lane_stream(10, 0);
    let policy = PolicyTable::random(index.state_count(), 3, 1.0, &mut rng);
    let batches = 100_000;
    let dim = index.state_count() * 3;
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..batches {
        let trajectories: Vec<_> = (0..4)
            .map(|_| rollout_from(&policy, &index, 0, &mut rng).unwrap())
            .collect();
        let rewards = trajectories
            .iter()
            .map(|t| draw_reward(&RewardSource::Bernoulli { p: 0.5 }, t, &mut rng))
            .collect();
        let group = RolloutGroup::new(trajectories, rewards).unwrap();
        let g = reinforce_gradient(&policy, &[group]).unwrap();
        for (i, v) in g.as_slice().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = batches as f64;
    for i in 0..dim {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean) / n).sqrt();
        assert!(
            mean.abs() <= 4.0 * se.max(1e-15),
            "entry {i}: {mean} vs se {se}"
        );
    }
}

#[test]
fn batch_entropy_matches_exact_weighting() {
    let index = TreeIndex::new(&TreeSpec::new(4, 3, 2)).unwrap();
    let mut rng = lane_stream(11, 0);
    let policy = PolicyTable::random(index.state_count(), 4, 1.0, &mut rng);
    let n = 100_000;
    let trajectories: Vec<_> = (0..n)
        .map(|_| rollout(&policy, &index, &mut rng).unwrap())
        .collect();
    let estimate = batch_entropy_estimate(&policy, &trajectories).unwrap();
    let per_traj: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            t.state_path
                .iter()
                .map(|&s| policy.state_entropy(s).unwrap())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let mean = per_traj.iter().sum::<f64>() / n as f64;
    let sd = (per_traj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let visitation = visitation_exact(&policy, &index).unwrap();
    let exact: f64 = (0..index.state_count())
        .map(|s| visitation.get(s) * policy.state_entropy(s).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((estimate - exact).abs() <= 4.0 * sd / (n as f64).sqrt());
}

proptest! {
    #[test]
    fn decode_inverts_encode(v in 2usize..6, t in 1usize..5, prompts in 1usize..4, pick in any::<u64>()) {
        let index = TreeIndex::new(&TreeSpec::new(v, t, prompts)).unwrap();
        let s = (pick % index.state_count() as u64) as usize;
        let decoded = index.decode(s).unwrap();
        prop_assert_eq!(index.encode(decoded.prompt, &decoded.tokens).unwrap(), s);
        prop_assert_eq!(index.depth(s), decoded.tokens.len());
    }

    #[test]
    fn rows_stay_normalized_and_bounded(logits in prop::collection::vec(-30.0f64..30.0, 2..12), shift in -50.0f64..50.0) {
        let a = row(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let b = row(&shifted);
        let pa = a.softmax_probs(0).unwrap();
        let pb = b.softmax_probs(0).unwrap();
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let h = a.state_entropy(0).unwrap();
        prop_assert!(h >= 0.0 && h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn advantages_are_centred(rewards in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        let adv = group_advantages(&rewards).unwrap();
        prop_assert!(adv.iter().sum::<f64>().abs() <= 1e-12);
    }
}
