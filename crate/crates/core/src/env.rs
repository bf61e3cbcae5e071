//! Prefix-tree token-generation MDP.
//!
//! A state is a prompt plus the tokens generated so far. Every response has
//! exactly `horizon` tokens, so the generation states of one prompt are the
//! prefixes of length `0..horizon`; leaves (length `horizon`) take no action and
//! carry no policy row.
//!
//! States are numbered prompt-major, then by prefix length, then
//! lexicographically by tokens. Within a prompt block the prefix
//! `(y_1, .., y_L)` sits at `(V^L - 1)/(V - 1) + sum_i y_i V^(L-i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_from, TabularPolicy};

/// Default cap on `vocab_size^horizon * prompt_count` for exact enumeration.
pub const DEFAULT_EXACT_BUDGET: u64 = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub vocab_size: usize,
    pub horizon: usize,
    pub prompt_count: usize,
    pub prompt_weights: Vec<f64>,
}

impl TreeSpec {
    /// Tree with uniformly weighted prompts.
    pub fn new(vocab_size: usize, horizon: usize, prompt_count: usize) -> Self {
        Self {
            vocab_size,
            horizon,
            prompt_count,
            prompt_weights: vec![1.0 / prompt_count.max(1) as f64; prompt_count],
        }
    }

    pub fn with_weights(
        vocab_size: usize,
        horizon: usize,
        prompt_weights: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            vocab_size,
            horizon,
            prompt_count: prompt_weights.len(),
            prompt_weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.horizon == 0 || self.prompt_count == 0 {
            return Err(Error::InvalidParameter(
                "vocab_size, horizon and prompt_count must be positive".into(),
            ));
        }
        if self.prompt_weights.len() != self.prompt_count {
            return Err(Error::InvalidParameter(format!(
                "{} prompt weights for {} prompts",
                self.prompt_weights.len(),
                self.prompt_count
            )));
        }
        if self
            .prompt_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidParameter(
                "prompt weights must be nonnegative".into(),
            ));
        }
        let total: f64 = self.prompt_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "prompt weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

/// A decoded state: prompt plus generated prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StateIndex {
    pub prompt: usize,
    pub tokens: Vec<usize>,
}

/// Bijection between prefixes and dense state indices.
#[derive(Clone, Debug)]
pub struct TreeIndex {
    spec: TreeSpec,
    /// `level_offsets[L]` = index of the first depth-`L` prefix inside a prompt block.
    level_offsets: Vec<usize>,
    per_prompt: usize,
}

impl TreeIndex {
    pub fn new(spec: &TreeSpec) -> Result<Self> {
        Self::with_budget(spec, DEFAULT_EXACT_BUDGET)
    }

    pub fn with_budget(spec: &TreeSpec, budget: u64) -> Result<Self> {
        spec.validate()?;
        let required = (spec.vocab_size as u128)
            .checked_pow(spec.horizon as u32)
            .and_then(|v| v.checked_mul(spec.prompt_count as u128))
            .unwrap_or(u128::MAX);
        if required > budget as u128 {
            return Err(Error::ExactModeTooLarge { required, budget });
        }
        let mut level_offsets = Vec::with_capacity(spec.horizon + 1);
        let mut offset = 0usize;
        let mut width = 1usize;
        for _ in 0..spec.horizon {
            level_offsets.push(offset);
            offset += width;
            width *= spec.vocab_size;
        }
        level_offsets.push(offset);
        Ok(Self {
            spec: spec.clone(),
            level_offsets,
            per_prompt: offset,
        })
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn states_per_prompt(&self) -> usize {
        self.per_prompt
    }

    pub fn state_count(&self) -> usize {
        self.per_prompt * self.spec.prompt_count
    }

    pub fn root(&self, prompt: usize) -> usize {
        prompt * self.per_prompt
    }

    pub fn encode(&self, prompt: usize, tokens: &[usize]) -> Result<usize> {
        if prompt >= self.spec.prompt_count {
            return Err(Error::InvalidParameter(format!(
                "prompt {prompt} out of range"
            )));
        }
        if tokens.len() >= self.spec.horizon {
            return Err(Error::InvalidParameter(format!(
                "prefix of length {} is a leaf (horizon {})",
                tokens.len(),
                self.spec.horizon
            )));
        }
        let mut rank = 0usize;
        for &t in tokens {
            if t >= self.spec.vocab_size {
                return Err(Error::ActionOutOfRange {
                    action: t,
                    action_count: self.spec.vocab_size,
                });
            }
            rank = rank * self.spec.vocab_size + t;
        }
        Ok(prompt * self.per_prompt + self.level_offsets[tokens.len()] + rank)
    }

    pub fn decode(&self, state: usize) -> Result<StateIndex> {
        if state >= self.state_count() {
            return Err(Error::StateOutOfRange {
                state,
                state_count: self.state_count(),
            });
        }
        let prompt = state / self.per_prompt;
        let local = state % self.per_prompt;
        let depth = self.depth_of_local(local);
        let mut rank = local - self.level_offsets[depth];
        let mut tokens = vec![0; depth];
        for slot in tokens.iter_mut().rev() {
            *slot = rank % self.spec.vocab_size;
            rank /= self.spec.vocab_size;
        }
        Ok(StateIndex { prompt, tokens })
    }

    pub fn depth(&self, state: usize) -> usize {
        self.depth_of_local(state % self.per_prompt)
    }

    fn depth_of_local(&self, local: usize) -> usize {
        // level_offsets is increasing; the last entry is the block size.
        self.level_offsets[1..].partition_point(|&o| o <= local)
    }

    /// The state reached by taking `action` at `state`, or `None` when the
    /// result is a leaf.
    pub fn child(&self, state: usize, action: usize) -> Option<usize> {
        let prompt = state / self.per_prompt;
        let local = state % self.per_prompt;
        let depth = self.depth_of_local(local);
        if depth + 1 >= self.spec.horizon {
            return None;
        }
        let rank = local - self.level_offsets[depth];
        Some(
            prompt * self.per_prompt
                + self.level_offsets[depth + 1]
                + rank * self.spec.vocab_size
                + action,
        )
    }

    fn check_policy<P: TabularPolicy + ?Sized>(&self, policy: &P) -> Result<()> {
        if policy.state_count() != self.state_count()
            || policy.action_count() != self.spec.vocab_size
        {
            return Err(Error::SpecMismatch(format!(
                "policy is {}x{} but the tree has {} states over {} tokens",
                policy.state_count(),
                policy.action_count(),
                self.state_count(),
                self.spec.vocab_size
            )));
        }
        Ok(())
    }
}

/// One sampled response.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub state_path: Vec<usize>,
    /// `log pi(tokens[t] | state_path[t])` under the acting policy.
    pub old_logprobs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sample one response autoregressively at temperature 1.
pub fn rollout<P: TabularPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    index: &TreeIndex,
    rng: &mut R,
) -> Result<Trajectory> {
    index.check_policy(policy)?;
    let prompt = sample_from(&index.spec.prompt_weights, rng);
    rollout_from(policy, index, prompt, rng)
}

/// Sample one response for a fixed prompt.
pub fn rollout_from<P: TabularPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    index: &TreeIndex,
    prompt: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    index.check_policy(policy)?;
    if prompt >= index.spec.prompt_count {
        return Err(Error::InvalidParameter(format!(
            "prompt {prompt} out of range"
        )));
    }
    let horizon = index.horizon();
    let mut tokens = Vec::with_capacity(horizon);
    let mut state_path = Vec::with_capacity(horizon);
    let mut old_logprobs = Vec::with_capacity(horizon);
    let mut state = index.root(prompt);
    for t in 0..horizon {
        let probs = policy.probs(state);
        let action = sample_from(&probs, rng);
        state_path.push(state);
        tokens.push(action);
        old_logprobs.push(probs[action].ln());
        if t + 1 < horizon {
            state = index
                .child(state, action)
                .expect("interior state has children");
        }
    }
    Ok(Trajectory {
        prompt,
        tokens,
        state_path,
        old_logprobs,
    })
}

/// Expected visit count per generation state.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitationMeasure {
    pub mass: Vec<f64>,
}

impl VisitationMeasure {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn get(&self, state: usize) -> f64 {
        self.mass[state]
    }

    /// Mass summed per depth; each entry is 1 for an exact measure.
    pub fn depth_totals(&self, index: &TreeIndex) -> Vec<f64> {
        let mut out = vec![0.0; index.horizon()];
        for (s, m) in self.mass.iter().enumerate() {
            out[index.depth(s)] += m;
        }
        out
    }
}

/// Exact visitation by one forward pass over the breadth-first order:
/// roots get their prompt weight, children get `d(parent) * pi(action|parent)`.
pub fn visitation_exact<P: TabularPolicy + ?Sized>(
    policy: &P,
    index: &TreeIndex,
) -> Result<VisitationMeasure> {
    index.check_policy(policy)?;
    let mut mass = vec![0.0; index.state_count()];
    for (prompt, &w) in index.spec.prompt_weights.iter().enumerate() {
        mass[index.root(prompt)] = w;
    }
    for s in 0..index.state_count() {
        if mass[s] == 0.0 || index.depth(s) + 1 >= index.horizon() {
            continue;
        }
        let probs = policy.probs(s);
        for (a, p) in probs.iter().enumerate() {
            let c = index.child(s, a).expect("interior state has children");
            mass[c] = mass[s] * p;
        }
    }
    Ok(VisitationMeasure { mass })
}

/// Monte Carlo visitation: visit counts over `samples` rollouts, divided by
/// `samples`.
pub fn visitation_mc<P: TabularPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    index: &TreeIndex,
    samples: usize,
    rng: &mut R,
) -> Result<VisitationMeasure> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be positive".into()));
    }
    let mut counts = vec![0u64; index.state_count()];
    for _ in 0..samples {
        let traj = rollout(policy, index, rng)?;
        for &s in &traj.state_path {
            counts[s] += 1;
        }
    }
    let n = samples as f64;
    Ok(VisitationMeasure {
        mass: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyTable, StateActionMatrix};
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn state_counts() {
        assert_eq!(
            TreeIndex::new(&TreeSpec::new(2, 2, 1))
                .unwrap()
                .state_count(),
            3
        );
        assert_eq!(
            TreeIndex::new(&TreeSpec::new(3, 3, 2))
                .unwrap()
                .state_count(),
            26
        );
        assert_eq!(
            TreeIndex::new(&TreeSpec::new(1, 4, 2))
                .unwrap()
                .state_count(),
            8
        );
    }

    #[test]
    fn documented_ordering() {
        let index = TreeIndex::new(&TreeSpec::new(2, 3, 2)).unwrap();
        let decoded: Vec<_> = (0..index.state_count())
            .map(|s| index.decode(s).unwrap())
            .collect();
        let expect = |prompt, tokens: &[usize]| StateIndex {
            prompt,
            tokens: tokens.to_vec(),
        };
        assert_eq!(decoded[0], expect(0, &[]));
        assert_eq!(decoded[1], expect(0, &[0]));
        assert_eq!(decoded[2], expect(0, &[1]));
        assert_eq!(decoded[3], expect(0, &[0, 0]));
        assert_eq!(decoded[6], expect(0, &[1, 1]));
        assert_eq!(decoded[7], expect(1, &[]));
    }

    #[test]
    fn budget_is_enforced() {
        let err = TreeIndex::with_budget(&TreeSpec::new(10, 6, 1), 200_000).unwrap_err();
        assert!(matches!(
            err,
            Error::ExactModeTooLarge {
                required: 1_000_000,
                ..
            }
        ));
        assert!(TreeIndex::new(&TreeSpec::new(usize::MAX, 8, 3)).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(TreeSpec::with_weights(3, 2, vec![0.5, 0.4]).is_err());
        assert!(TreeSpec::with_weights(3, 2, vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn horizon_one_rollout_and_visitation() {
        let spec = TreeSpec::with_weights(4, 1, vec![0.2, 0.3, 0.5]).unwrap();
        let index = TreeIndex::new(&spec).unwrap();
        let policy = PolicyTable::random(index.state_count(), 4, 1.0, &mut rng::stream(0));
        let traj = rollout(&policy, &index, &mut rng::stream(1)).unwrap();
        assert_eq!(traj.tokens.len(), 1);
        assert_eq!(traj.state_path, vec![index.root(traj.prompt)]);
        let d = visitation_exact(&policy, &index).unwrap();
        assert_eq!(d.mass, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn uniform_binary_visitation() {
        let index = TreeIndex::new(&TreeSpec::new(2, 2, 1)).unwrap();
        let d = visitation_exact(&PolicyTable::uniform(3, 2), &index).unwrap();
        assert_eq!(d.mass, vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let index = TreeIndex::new(&TreeSpec::new(2, 2, 1)).unwrap();
        let err = rollout(&PolicyTable::uniform(4, 2), &index, &mut rng::stream(0)).unwrap_err();
        assert!(matches!(err, Error::SpecMismatch(_)));
    }

    fn greedy(index: &TreeIndex) -> PolicyTable {
        let mut logits = StateActionMatrix::zeros(index.state_count(), index.vocab_size());
        for s in 0..index.state_count() {
            logits.set(s, s % index.vocab_size(), 60.0);
        }
        PolicyTable::from_logits(logits).unwrap()
    }

    #[test]
    fn deterministic_policy_follows_greedy_path() {
        let index = TreeIndex::new(&TreeSpec::new(3, 3, 1)).unwrap();
        let policy = greedy(&index);
        let mut state = 0;
        let mut path = vec![];
        for _ in 0..3 {
            let a = state % 3;
            path.push(a);
            state = index.child(state, a).unwrap_or(0);
        }
        let mut r = rng::stream(4);
        let hits = (0..1000)
            .filter(|_| rollout(&policy, &index, &mut r).unwrap().tokens == path)
            .count();
        assert!(hits >= 990);

        let d = visitation_mc(&policy, &index, 500, &mut r).unwrap();
        assert_eq!(d.depth_totals(&index), vec![1.0, 1.0, 1.0]);
        assert_eq!(d.mass.iter().filter(|&&m| m == 1.0).count(), 3);
    }

    #[test]
    fn single_sample_visitation() {
        let index = TreeIndex::new(&TreeSpec::new(3, 3, 2)).unwrap();
        let policy = PolicyTable::random(index.state_count(), 3, 1.0, &mut rng::stream(2));
        let d = visitation_mc(&policy, &index, 1, &mut rng::stream(3)).unwrap();
        assert_eq!(d.total(), 3.0);
        assert!(d.mass.iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(visitation_mc(&policy, &index, 0, &mut rng::stream(3)).is_err());
    }

    #[test]
    fn rollout_is_reproducible() {
        let index = TreeIndex::new(&TreeSpec::new(6, 3, 4)).unwrap();
        let policy = PolicyTable::random(index.state_count(), 6, 1.0, &mut rng::stream(2));
        let a = rollout(&policy, &index, &mut rng::stream(17)).unwrap();
        let b = rollout(&policy, &index, &mut rng::stream(17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visitation_invariant_to_prompt_order() {
        let spec = TreeSpec::with_weights(3, 2, vec![0.1, 0.6, 0.3]).unwrap();
        let index = TreeIndex::new(&spec).unwrap();
        let policy = PolicyTable::random(index.state_count(), 3, 1.0, &mut rng::stream(8));
        let d = visitation_exact(&policy, &index).unwrap();

        // reverse the prompts and their rows
        let perm = [2usize, 1, 0];
        let rev_spec =
            TreeSpec::with_weights(3, 2, perm.iter().map(|&p| spec.prompt_weights[p]).collect())
                .unwrap();
        let rev_index = TreeIndex::new(&rev_spec).unwrap();
        let mut logits = StateActionMatrix::zeros(index.state_count(), 3);
        for (new_p, &old_p) in perm.iter().enumerate() {
            for local in 0..index.states_per_prompt() {
                let src = old_p * index.states_per_prompt() + local;
                let dst = new_p * index.states_per_prompt() + local;
                logits
                    .row_mut(dst)
                    .copy_from_slice(policy.logits().row(src));
            }
        }
        let rev = visitation_exact(&PolicyTable::from_logits(logits).unwrap(), &rev_index).unwrap();
        for (new_p, &old_p) in perm.iter().enumerate() {
            for local in 0..index.states_per_prompt() {
                let a = d.mass[old_p * index.states_per_prompt() + local];
                let b = rev.mass[new_p * index.states_per_prompt() + local];
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(v in 1usize..5, t in 1usize..5, p in 1usize..4) {
            let index = TreeIndex::new(&TreeSpec::new(v, t, p)).unwrap();
            for s in 0..index.state_count() {
                let st = index.decode(s).unwrap();
                prop_assert_eq!(index.encode(st.prompt, &st.tokens).unwrap(), s);
                prop_assert_eq!(index.depth(s), st.tokens.len());
            }
        }

        #[test]
        fn exact_visitation_depth_masses(seed in 0u64..200) {
            let index = TreeIndex::new(&TreeSpec::new(4, 3, 3)).unwrap();
            let policy = PolicyTable::random(index.state_count(), 4, 2.0, &mut rng::stream(seed));
            let d = visitation_exact(&policy, &index).unwrap();
            for m in d.depth_totals(&index) {
                prop_assert!((m - 1.0).abs() <= 1e-12);
            }
            prop_assert!((d.total() - 3.0).abs() <= 1e-9);
        }

        #[test]
        fn rollout_logprobs_match_policy(seed in 0u64..200) {
            let index = TreeIndex::new(&TreeSpec::new(5, 3, 2)).unwrap();
            let policy = PolicyTable::random(index.state_count(), 5, 1.0, &mut rng::stream(seed));
            let traj = rollout(&policy, &index, &mut rng::stream(seed + 1)).unwrap();
            for t in 0..3 {
                let lp = policy.softmax_probs(traj.state_path[t]).unwrap()[traj.tokens[t]].ln();
                prop_assert!((lp - traj.old_logprobs[t]).abs() <= 1e-12);
                let prefix = &traj.tokens[..t];
                prop_assert_eq!(index.encode(traj.prompt, prefix).unwrap(), traj.state_path[t]);
            }
        }
    }
}
