//! Finite Markov decision processes with exact distribution propagation
//! and fixed-horizon trajectory sampling.
//!
//! All exact computations (soft dynamic programming, ideal gradients,
//! certificates) run on [`FiniteMdp`]. Terminal states are modeled as
//! absorbing with zero reward so that every trajectory has exactly the
//! requested length.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MpgError, Result};
use crate::policy::{ExtendedPolicy, PolicyTable};

pub const SIMPLEX_TOL: f64 = 1e-12;

/// Optional reward sampling rule. The sampled reward always has mean
/// `r(a,s)`; noise only matters for update-unbiasedness checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardNoise {
    /// Uniform on `[-half_width, half_width]` added to the mean.
    Uniform { half_width: f64 },
    /// Gaussian with the given standard deviation added to the mean.
    Gaussian { std: f64 },
}

#[derive(Debug, Clone)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `p[s][a][s']`, row-major.
    transition: Vec<f64>,
    /// `r[a][s]`, row-major.
    mean_reward: Vec<f64>,
    pub reward_noise: Option<RewardNoise>,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    r_max: f64,
}

impl FiniteMdp {
    /// Builds an MDP from dense tables. Shapes are checked here; the
    /// probabilistic invariants are reported by [`validate`].
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        mean_reward: Vec<f64>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(MpgError::InvalidArgument(
                "n_states and n_actions must be positive".into(),
            ));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MpgError::DimensionMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if mean_reward.len() != n_actions * n_states {
            return Err(MpgError::DimensionMismatch(format!(
                "mean_reward has {} entries, expected {}",
                mean_reward.len(),
                n_actions * n_states
            )));
        }
        if initial_dist.len() != n_states || terminal.len() != n_states {
            return Err(MpgError::DimensionMismatch(
                "initial_dist/terminal length must equal n_states".into(),
            ));
        }
        let r_max = mean_reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Ok(Self {
            n_states,
            n_actions,
            transition,
            mean_reward,
            reward_noise: None,
            initial_dist,
            terminal,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, a: usize, s: usize) -> f64 {
        self.mean_reward[a * self.n_states + s]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn set_initial_dist(&mut self, dist: Vec<f64>) -> Result<()> {
        if dist.len() != self.n_states {
            return Err(MpgError::DimensionMismatch(
                "initial_dist length must equal n_states".into(),
            ));
        }
        self.initial_dist = dist;
        Ok(())
    }

    /// Replaces the start distribution with the uniform measure over
    /// non-terminal states, as the theory-side objective assumes.
    pub fn with_uniform_initial(mut self) -> Self {
        let free: Vec<usize> = (0..self.n_states).filter(|&s| !self.terminal[s]).collect();
        let mut dist = vec![0.0; self.n_states];
        for &s in &free {
            dist[s] = 1.0 / free.len() as f64;
        }
        self.initial_dist = dist;
        self
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn sample_reward<R: Rng + ?Sized>(&self, a: usize, s: usize, rng: &mut R) -> f64 {
        let mean = self.reward(a, s);
        if self.terminal[s] {
            return 0.0;
        }
        match self.reward_noise {
            None => mean,
            Some(RewardNoise::Uniform { half_width }) => {
                mean + rng.random_range(-half_width..=half_width)
            }
            Some(RewardNoise::Gaussian { std }) => {
                mean + Normal::new(0.0, std).expect("valid std").sample(rng)
            }
        }
    }
}

/// A probability vector over states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution(pub Vec<f64>);

impl StateDistribution {
    pub fn point_mass(n_states: usize, s: usize) -> Self {
        let mut probs = vec![0.0; n_states];
        probs[s] = 1.0;
        StateDistribution(probs)
    }

    pub fn uniform(n_states: usize) -> Self {
        StateDistribution(vec![1.0 / n_states as f64; n_states])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// The length-`n` record of one episode sampled under an extended policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub irreducible: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the structural invariants of an MDP and reports whether the
/// reachability graph restricted to non-terminal states is strongly
/// connected (the finite-space analogue of irreducibility).
/// Non-irreducible MDPs are flagged, not rejected.
pub fn validate(mdp: &FiniteMdp) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (ns, na) = (mdp.n_states, mdp.n_actions);

    for s in 0..ns {
        for a in 0..na {
            let row = mdp.transition_row(s, a);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                report
                    .violations
                    .push(format!("row ({s},{a}) sums to {sum}"));
            }
            if let Some(s2) = row.iter().position(|&p| p < 0.0) {
                report
                    .violations
                    .push(format!("negative probability p[{s}][{a}][{s2}]"));
            }
        }
    }

    let init_sum: f64 = mdp.initial_dist.iter().sum();
    if (init_sum - 1.0).abs() > SIMPLEX_TOL {
        report
            .violations
            .push(format!("initial_dist sums to {init_sum}"));
    }
    if mdp.initial_dist.iter().any(|&p| p < 0.0) {
        report
            .violations
            .push("initial_dist has a negative entry".into());
    }

    for s in 0..ns {
        if !mdp.terminal[s] {
            continue;
        }
        for a in 0..na {
            if (mdp.p(s, a, s) - 1.0).abs() > SIMPLEX_TOL {
                report
                    .violations
                    .push(format!("terminal state {s} is not absorbing under action {a}"));
            }
            if mdp.reward(a, s) != 0.0 {
                report
                    .violations
                    .push(format!("terminal state {s} has nonzero reward for action {a}"));
            }
        }
    }

    if !mdp.r_max.is_finite() {
        report.violations.push("rewards are not bounded".into());
    }

    report.irreducible = strongly_connected_nonterminal(mdp);
    report
}

fn strongly_connected_nonterminal(mdp: &FiniteMdp) -> bool {
    let ns = mdp.n_states;
    let free: Vec<usize> = (0..ns).filter(|&s| !mdp.terminal[s]).collect();
    if free.is_empty() {
        return false;
    }
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; ns];
        let mut stack = vec![free[0]];
        seen[free[0]] = true;
        let mut count = 0;
        while let Some(s) = stack.pop() {
            count += 1;
            for s2 in free.iter().copied() {
                if seen[s2] {
                    continue;
                }
                let edge = (0..mdp.n_actions).any(|a| {
                    if forward {
                        mdp.p(s, a, s2) > 0.0
                    } else {
                        mdp.p(s2, a, s) > 0.0
                    }
                });
                if edge {
                    seen[s2] = true;
                    stack.push(s2);
                }
            }
        }
        count
    };
    reach(true) == free.len() && reach(false) == free.len()
}

/// One step of exact distribution propagation:
/// `d'[s'] = sum_s sum_a d[s] pi(a|s) p[s][a][s']`.
pub fn propagate(
    mdp: &FiniteMdp,
    dist: &StateDistribution,
    policy: &PolicyTable,
) -> Result<StateDistribution> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if dist.0.len() != ns {
        return Err(MpgError::DimensionMismatch(
            "distribution length does not match n_states".into(),
        ));
    }
    if policy.n_states() != ns || policy.n_actions() != na {
        return Err(MpgError::DimensionMismatch(
            "policy table shape does not match the MDP".into(),
        ));
    }
    let mut out = vec![0.0; ns];
    for s in 0..ns {
        let d = dist.0[s];
        if d == 0.0 {
            continue;
        }
        for a in 0..na {
            let w = d * policy.prob(a, s);
            if w == 0.0 {
                continue;
            }
            for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                out[s2] += w * p;
            }
        }
    }
    Ok(StateDistribution(out))
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples one fixed-length trajectory: `s_0 ~ initial_dist`,
/// `a_k ~ pi^{(n-k)}(.|s_k)`, rewards with mean `r(a_k, s_k)`.
/// Terminal states absorb and keep emitting zero reward.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &ExtendedPolicy,
    rng: &mut R,
) -> Trajectory {
    let n = policy.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);

    let mut s = sample_categorical(&mdp.initial_dist, rng);
    states.push(s);
    for k in 0..n {
        let probs = policy.step(n - k).action_distribution(s);
        let a = sample_categorical(&probs, rng);
        let r = mdp.sample_reward(a, s, rng);
        let s2 = if mdp.terminal[s] {
            s
        } else {
            sample_categorical(mdp.transition_row(s, a), rng)
        };
        actions.push(a);
        rewards.push(r);
        states.push(s2);
        s = s2;
    }
    Trajectory {
        states,
        actions,
        rewards,
    }
}

/// Trajectory sampler for policies that are not [`ExtendedPolicy`]
/// values: `dist_for(s, steps_left)` supplies the action distribution
/// used at each step. Same terminal-absorbing semantics as
/// [`sample_trajectory`].
pub fn sample_trajectory_with<F, R>(
    mdp: &FiniteMdp,
    mut dist_for: F,
    horizon: usize,
    rng: &mut R,
) -> Trajectory
where
    F: FnMut(usize, usize) -> Vec<f64>,
    R: Rng + ?Sized,
{
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);

    let mut s = sample_categorical(&mdp.initial_dist, rng);
    states.push(s);
    for k in 0..horizon {
        let probs = dist_for(s, horizon - k);
        let a = sample_categorical(&probs, rng);
        let r = mdp.sample_reward(a, s, rng);
        let s2 = if mdp.terminal[s] {
            s
        } else {
            sample_categorical(mdp.transition_row(s, a), rng)
        };
        actions.push(a);
        rewards.push(r);
        states.push(s2);
        s = s2;
    }
    Trajectory {
        states,
        actions,
        rewards,
    }
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    mean_reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
    terminal: Vec<usize>,
}

impl FiniteMdp {
    pub fn to_json(&self) -> serde_json::Value {
        let doc = MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.transition_row(s, a).to_vec())
                        .collect()
                })
                .collect(),
            mean_reward: (0..self.n_actions)
                .map(|a| (0..self.n_states).map(|s| self.reward(a, s)).collect())
                .collect(),
            initial_dist: self.initial_dist.clone(),
            terminal: (0..self.n_states).filter(|&s| self.terminal[s]).collect(),
        };
        serde_json::to_value(doc).expect("serializable")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let doc: MdpJson = serde_json::from_value(value.clone())?;
        let (ns, na) = (doc.n_states, doc.n_actions);
        let mut transition = Vec::with_capacity(ns * na * ns);
        for row_s in &doc.transition {
            for row_a in row_s {
                transition.extend_from_slice(row_a);
            }
        }
        let mut mean_reward = Vec::with_capacity(na * ns);
        for row in &doc.mean_reward {
            mean_reward.extend_from_slice(row);
        }
        let mut terminal = vec![false; ns];
        for &s in &doc.terminal {
            if s >= ns {
                return Err(MpgError::InvalidArgument(format!(
                    "terminal index {s} out of range"
                )));
            }
            terminal[s] = true;
        }
        FiniteMdp::new(ns, na, transition, mean_reward, doc.initial_dist, terminal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyTable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn two_state_cycle() -> FiniteMdp {
        // deterministic cycle 0 -> 1 -> 0 under the single action
        let transition = vec![
            0.0, 1.0, // s=0, a=0
            1.0, 0.0, // s=1, a=0
        ];
        FiniteMdp::new(
            2,
            1,
            transition,
            vec![1.0, 1.0],
            vec![0.5, 0.5],
            vec![false, false],
        )
        .unwrap()
    }

    #[test]
    fn cycle_is_valid_and_irreducible() {
        let report = validate(&two_state_cycle());
        assert!(report.is_valid());
        assert!(report.irreducible);
    }

    #[test]
    fn bad_row_sum_is_reported() {
        let transition = vec![0.0, 0.9, 1.0, 0.0];
        let mdp = FiniteMdp::new(
            2,
            1,
            transition,
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let report = validate(&mdp);
        assert!(!report.is_valid());
        assert!(report.violations[0].contains("row (0,0) sums to 0.9"));
    }

    #[test]
    fn propagate_point_mass_deterministic() {
        let mdp = two_state_cycle();
        let policy = PolicyTable::uniform(2, 1);
        let d0 = StateDistribution::point_mass(2, 0);
        let d1 = propagate(&mdp, &d0, &policy).unwrap();
        assert_eq!(d1.0, vec![0.0, 1.0]);
    }

    #[test]
    fn propagate_uniform_fixed_point_doubly_stochastic() {
        // symmetric random walk on a 3-cycle is doubly stochastic
        let transition = vec![
            0.0, 0.5, 0.5, // s=0
            0.5, 0.0, 0.5, // s=1
            0.5, 0.5, 0.0, // s=2
        ];
        let mdp = FiniteMdp::new(
            3,
            1,
            transition,
            vec![0.0; 3],
            vec![1.0 / 3.0; 3],
            vec![false; 3],
        )
        .unwrap();
        let policy = PolicyTable::uniform(3, 1);
        let d = propagate(&mdp, &StateDistribution::uniform(3), &policy).unwrap();
        for p in d.0 {
            assert!((p - 1.0 / 3.0).abs() < SIMPLEX_TOL);
        }
    }

    #[test]
    fn propagate_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mdp = crate::instances::random_mdp(3, 2, &mut rng);
        let policy = crate::instances::random_policy_table(3, 2, &mut rng);
        let dist = StateDistribution(crate::instances::random_simplex(3, &mut rng));

        let got = propagate(&mdp, &dist, &policy).unwrap();
        // independent brute-force sum
        let mut want = vec![0.0; 3];
        for s2 in 0..3 {
            for s in 0..3 {
                for a in 0..2 {
                    want[s2] += dist.0[s] * policy.prob(a, s) * mdp.p(s, a, s2);
                }
            }
        }
        for (g, w) in got.0.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn trajectory_has_fixed_length_and_terminal_absorbs() {
        // state 1 is terminal-absorbing
        let transition = vec![
            0.0, 1.0, // s=0, a=0
            1.0, 0.0, // s=0, a=1 (self loop back to 0? no: to s=0)
            0.0, 1.0, // s=1, a=0
            0.0, 1.0, // s=1, a=1
        ];
        let mdp = FiniteMdp::new(
            2,
            2,
            transition,
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0],
            vec![false, true],
        )
        .unwrap();
        let policy = ExtendedPolicy::tabular(2, 2, 5, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let traj = sample_trajectory(&mdp, &policy, &mut rng);
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.actions.len(), 5);
        assert_eq!(traj.rewards.len(), 5);
        let first_terminal = traj.states.iter().position(|&s| s == 1);
        if let Some(k) = first_terminal {
            for j in k..traj.states.len() {
                assert_eq!(traj.states[j], 1);
            }
            for j in k..traj.rewards.len() {
                assert_eq!(traj.rewards[j], 0.0);
            }
        }
    }

    #[test]
    fn empirical_state_law_matches_propagation() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mdp = crate::instances::random_mdp(4, 2, &mut rng);
        let n = 3;
        let policy = crate::instances::random_tabular_policy(&mdp, n, 0.5, &mut rng);

        // exact law of S_2 via propagation with pi^{(n)}, pi^{(n-1)}
        let mut dist = StateDistribution(mdp.initial_dist().to_vec());
        for k in 0..2usize {
            let table = policy.step(n - k).as_table();
            dist = propagate(&mdp, &dist, &table).unwrap();
        }

        let samples = 100_000usize;
        let mut counts = vec![0usize; 4];
        for _ in 0..samples {
            let traj = sample_trajectory(&mdp, &policy, &mut rng);
            counts[traj.states[2]] += 1;
        }
        for s in 0..4 {
            let p = dist.0[s];
            let emp = counts[s] as f64 / samples as f64;
            let sigma = (p * (1.0 - p) / samples as f64).sqrt();
            assert!(
                (emp - p).abs() <= 3.0 * sigma + 1e-9,
                "state {s}: emp {emp} vs exact {p}"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let mdp = two_state_cycle();
        let doc = mdp.to_json();
        let back = FiniteMdp::from_json(&doc).unwrap();
        assert_eq!(back.n_states(), 2);
        assert_eq!(back.transition_row(0, 0), mdp.transition_row(0, 0));
        assert_eq!(back.reward(0, 1), mdp.reward(0, 1));
    }
}
