//! Random problem instances used by property checks, the verification
//! suite, and tests.

use rand::Rng;

use crate::mdp::FiniteMdp;
use crate::policy::{ExtendedPolicy, PolicyTable};

pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let sum: f64 = v.iter().sum();
    for x in &mut v {
        *x /= sum;
    }
    v
}

/// Fully stochastic MDP: random transition rows, rewards in [-1, 1],
/// uniform initial distribution, no terminal states.
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> FiniteMdp {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(random_simplex(n_states, rng));
    }
    let mean_reward: Vec<f64> = (0..n_actions * n_states)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FiniteMdp::new(
        n_states,
        n_actions,
        transition,
        mean_reward,
        vec![1.0 / n_states as f64; n_states],
        vec![false; n_states],
    )
    .expect("random MDP is well formed")
}

pub fn random_policy_table<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    rng: &mut R,
) -> PolicyTable {
    let rows = (0..n_states)
        .map(|_| random_simplex(n_actions, rng))
        .collect();
    PolicyTable::from_rows(rows).expect("random rows are distributions")
}

/// Tabular extended policy with Gaussian-ish random preferences.
pub fn random_tabular_policy<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    horizon: usize,
    tau: f64,
    rng: &mut R,
) -> ExtendedPolicy {
    let mut policy = ExtendedPolicy::for_mdp(mdp, horizon, tau);
    for i in 1..=horizon {
        for t in &mut policy.step_mut(i).theta {
            *t = rng.random_range(-1.0..1.0);
        }
    }
    policy
}
