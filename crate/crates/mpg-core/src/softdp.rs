//! Exact soft-Bellman dynamic programming on finite MDPs.
//!
//! Provides finite-horizon policy evaluation, the optimal-policy
//! recursion (the ground-truth oracle that trained policies are checked
//! against), discounted infinite-horizon soft value iteration, and the
//! value-gap identity.
//!
//! All recursions use log-sum-exp in double precision; nothing here is
//! sampled.

use serde::Serialize;

use crate::error::{MpgError, Result};
use crate::mdp::{propagate, FiniteMdp, StateDistribution};
use crate::policy::{ExtendedPolicy, PolicyTable};

/// Per-horizon optimal value, Q and policy tables.
///
/// `v_star[i][s]` for `i = 0..=n` with `v_star[0]` identically zero;
/// `q_star[i-1][s * n_actions + a]` and `pi_star[i-1]` for `i = 1..=n`.
#[derive(Debug, Clone)]
pub struct SoftDpSolution {
    pub horizon: usize,
    pub tau: f64,
    pub gamma: f64,
    pub v_star: Vec<Vec<f64>>,
    pub q_star: Vec<Vec<f64>>,
    pub pi_star: Vec<PolicyTable>,
    n_actions: usize,
}

impl SoftDpSolution {
    pub fn v(&self, i: usize, s: usize) -> f64 {
        self.v_star[i][s]
    }

    pub fn q(&self, i: usize, a: usize, s: usize) -> f64 {
        self.q_star[i - 1][s * self.n_actions + a]
    }

    /// The i-step optimal policy table, `1 <= i <= n`.
    pub fn pi(&self, i: usize) -> &PolicyTable {
        &self.pi_star[i - 1]
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Doc<'a> {
            horizon: usize,
            tau: f64,
            gamma: f64,
            v_star: &'a [Vec<f64>],
            q_star: &'a [Vec<f64>],
            pi_star: &'a [PolicyTable],
        }
        serde_json::to_value(Doc {
            horizon: self.horizon,
            tau: self.tau,
            gamma: self.gamma,
            v_star: &self.v_star,
            q_star: &self.q_star,
            pi_star: &self.pi_star,
        })
        .expect("serializable")
    }
}

/// Value/Q tables of a fixed extended policy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    n_actions: usize,
}

impl PolicyEvaluation {
    pub fn v(&self, i: usize, s: usize) -> f64 {
        self.v[i][s]
    }

    pub fn q(&self, i: usize, a: usize, s: usize) -> f64 {
        self.q[i - 1][s * self.n_actions + a]
    }
}

fn check_shapes(mdp: &FiniteMdp, tables: &[PolicyTable], baseline: &PolicyTable) -> Result<()> {
    for t in tables.iter().chain(std::iter::once(baseline)) {
        if t.n_states() != mdp.n_states() || t.n_actions() != mdp.n_actions() {
            return Err(MpgError::DimensionMismatch(
                "policy table shape does not match the MDP".into(),
            ));
        }
    }
    if tables.is_empty() {
        return Err(MpgError::InvalidArgument("horizon must be >= 1".into()));
    }
    Ok(())
}

/// Finite-horizon evaluation of the extended policy given as tables
/// `pi^{(1..n)}`:
///
/// `V^{(i)}(s) = sum_a pi^{(i)}(a|s) [ r(a,s) - tau log(pi^{(i)}/baseline)(a|s) ]
///              + gamma sum_{a,s'} pi^{(i)}(a|s) p[s][a][s'] V^{(i-1)}(s')`
pub fn evaluate_policy(
    mdp: &FiniteMdp,
    tables: &[PolicyTable],
    baseline: &PolicyTable,
    tau: f64,
    gamma: f64,
) -> Result<PolicyEvaluation> {
    check_shapes(mdp, tables, baseline)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = tables.len();
    let mut v = vec![vec![0.0; ns]];
    let mut q = Vec::with_capacity(n);
    for i in 1..=n {
        let pi = &tables[i - 1];
        let prev = &v[i - 1];
        let mut qi = vec![0.0; ns * na];
        let mut vi = vec![0.0; ns];
        for s in 0..ns {
            let mut acc = 0.0;
            for a in 0..na {
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(prev.iter())
                    .map(|(&p, &vp)| p * vp)
                    .sum();
                let qv = mdp.reward(a, s) + gamma * cont;
                qi[s * na + a] = qv;
                let pa = pi.prob(a, s);
                if pa > 0.0 {
                    acc += pa * (qv - tau * (pa / baseline.prob(a, s)).ln());
                }
            }
            vi[s] = acc;
        }
        q.push(qi);
        v.push(vi);
    }
    Ok(PolicyEvaluation { v, q, n_actions: na })
}

/// Backward recursion for the optimal extended policy:
///
/// `Q*^{(i)}(a,s) = r(a,s) + gamma sum_{s'} p V*^{(i-1)}(s')`,
/// `V*^{(i)}(s) = tau log sum_a baseline(a|s) exp(Q*^{(i)}(a,s)/tau)`,
/// `pi*^{(i)}(a|s) = baseline(a|s) exp((Q*^{(i)}(a,s) - V*^{(i)}(s))/tau)`.
pub fn solve_optimal(
    mdp: &FiniteMdp,
    baseline: &PolicyTable,
    horizon: usize,
    tau: f64,
    gamma: f64,
) -> Result<SoftDpSolution> {
    if horizon == 0 {
        return Err(MpgError::InvalidArgument("horizon must be >= 1".into()));
    }
    if tau <= 0.0 {
        return Err(MpgError::InvalidArgument("tau must be positive".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v_star = vec![vec![0.0; ns]];
    let mut q_star = Vec::with_capacity(horizon);
    let mut pi_star = Vec::with_capacity(horizon);
    for i in 1..=horizon {
        let prev = &v_star[i - 1];
        let mut qi = vec![0.0; ns * na];
        let mut vi = vec![0.0; ns];
        let mut rows = Vec::with_capacity(ns);
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(prev.iter())
                    .map(|(&p, &vp)| p * vp)
                    .sum();
                qi[s * na + a] = mdp.reward(a, s) + gamma * cont;
            }
            let q_row = &qi[s * na..(s + 1) * na];
            let vmax = q_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..na)
                .map(|a| baseline.prob(a, s) * ((q_row[a] - vmax) / tau).exp())
                .sum();
            let vs = vmax + tau * z.ln();
            vi[s] = vs;
            let row: Vec<f64> = (0..na)
                .map(|a| baseline.prob(a, s) * ((q_row[a] - vs) / tau).exp())
                .collect();
            rows.push(row);
        }
        q_star.push(qi);
        v_star.push(vi);
        pi_star.push(PolicyTable::from_rows(rows)?);
    }
    Ok(SoftDpSolution {
        horizon,
        tau,
        gamma,
        v_star,
        q_star,
        pi_star,
        n_actions: na,
    })
}

/// Infinite-horizon discounted soft value iteration. Fixed point of
/// `V(s) = tau log sum_a baseline(a|s) exp((r(a,s) + gamma sum p V)/tau)`.
pub fn solve_infinite_discounted(
    mdp: &FiniteMdp,
    baseline: &PolicyTable,
    tau: f64,
    gamma: f64,
    tol: f64,
) -> Result<(Vec<f64>, PolicyTable)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MpgError::InvalidArgument(
            "infinite-horizon solve requires gamma in (0,1)".into(),
        ));
    }
    if tol <= 0.0 {
        return Err(MpgError::InvalidArgument("tol must be positive".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    // soft backup range; the KL term is non-positive for any baseline
    let v_range = (mdp.r_max() + tau * (na as f64).ln()) / (1.0 - gamma);
    let cap = ((tol / v_range.max(tol)).ln() / gamma.ln()).ceil() as usize + 64;

    let mut v = vec![0.0; ns];
    for _ in 0..cap {
        let mut next = vec![0.0; ns];
        let mut delta = 0.0f64;
        for s in 0..ns {
            let q: Vec<f64> = (0..na)
                .map(|a| {
                    let cont: f64 = mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(v.iter())
                        .map(|(&p, &vp)| p * vp)
                        .sum();
                    mdp.reward(a, s) + gamma * cont
                })
                .collect();
            let vmax = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..na)
                .map(|a| baseline.prob(a, s) * ((q[a] - vmax) / tau).exp())
                .sum();
            next[s] = vmax + tau * z.ln();
            delta = delta.max((next[s] - v[s]).abs());
        }
        v = next;
        if delta < tol {
            let rows: Vec<Vec<f64>> = (0..ns)
                .map(|s| {
                    let q: Vec<f64> = (0..na)
                        .map(|a| {
                            let cont: f64 = mdp
                                .transition_row(s, a)
                                .iter()
                                .zip(v.iter())
                                .map(|(&p, &vp)| p * vp)
                                .sum();
                            mdp.reward(a, s) + gamma * cont
                        })
                        .collect();
                    let vmax = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..na)
                        .map(|a| baseline.prob(a, s) * ((q[a] - vmax) / tau).exp())
                        .sum();
                    let vs = vmax + tau * z.ln();
                    (0..na)
                        .map(|a| baseline.prob(a, s) * ((q[a] - vs) / tau).exp())
                        .collect()
                })
                .collect();
            return Ok((v, PolicyTable::from_rows(rows)?));
        }
    }
    Err(MpgError::NoConvergence(cap))
}

/// The translation operator `T_{n,m}` on extended policies: keep the
/// first `m` step policies.
pub fn truncate_policy(policy: &ExtendedPolicy, m: usize) -> Result<ExtendedPolicy> {
    if m == 0 || m >= policy.horizon() {
        return Err(MpgError::InvalidArgument(format!(
            "truncation target {m} must satisfy 1 <= m < {}",
            policy.horizon()
        )));
    }
    ExtendedPolicy::from_steps(policy.steps()[..m].to_vec())
}

/// `T_{n,m}` on a DP solution: keep horizons `1..=m`.
pub fn truncate_solution(sol: &SoftDpSolution, m: usize) -> Result<SoftDpSolution> {
    if m == 0 || m >= sol.horizon {
        return Err(MpgError::InvalidArgument(format!(
            "truncation target {m} must satisfy 1 <= m < {}",
            sol.horizon
        )));
    }
    Ok(SoftDpSolution {
        horizon: m,
        tau: sol.tau,
        gamma: sol.gamma,
        v_star: sol.v_star[..=m].to_vec(),
        q_star: sol.q_star[..m].to_vec(),
        pi_star: sol.pi_star[..m].to_vec(),
        n_actions: sol.n_actions,
    })
}

/// Both sides of the value-gap identity, per starting state:
///
/// `V_pi^{(n)}(s) - V*^{(n)}(s)
///   = -tau E_pi[ sum_{i=0}^{n-1} gamma^i KL(pi^{(n-i)} || pi*^{(n-i)})(S_i) | S_0 = s ]`.
///
/// The right side is computed by exact distribution propagation. A
/// mismatch beyond `tol` is an implementation bug, reported as an error.
#[derive(Debug, Clone)]
pub struct ValueGap {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

pub fn value_gap(
    mdp: &FiniteMdp,
    tables: &[PolicyTable],
    baseline: &PolicyTable,
    tau: f64,
    gamma: f64,
    tol: f64,
) -> Result<ValueGap> {
    check_shapes(mdp, tables, baseline)?;
    let n = tables.len();
    let ns = mdp.n_states();
    let eval = evaluate_policy(mdp, tables, baseline, tau, gamma)?;
    let oracle = solve_optimal(mdp, baseline, n, tau, gamma)?;

    let lhs: Vec<f64> = (0..ns)
        .map(|s| eval.v(n, s) - oracle.v(n, s))
        .collect();

    let mut rhs = vec![0.0; ns];
    for s0 in 0..ns {
        let mut dist = StateDistribution::point_mass(ns, s0);
        let mut acc = 0.0;
        let mut disc = 1.0;
        for i in 0..n {
            let step = n - i;
            let pi = &tables[step - 1];
            let kl = pi.kl_per_state(oracle.pi(step))?;
            let expected: f64 = dist.probs().iter().zip(&kl).map(|(&p, &k)| p * k).sum();
            acc += disc * expected;
            disc *= gamma;
            if i + 1 < n {
                dist = propagate(mdp, &dist, pi)?;
            }
        }
        rhs[s0] = -tau * acc;
    }

    let max_err = lhs
        .iter()
        .zip(&rhs)
        .fold(0.0f64, |m, (l, r)| m.max((l - r).abs()));
    if max_err > tol {
        return Err(MpgError::IdentityViolation(format!(
            "value-gap identity off by {max_err:.3e} (tol {tol:.1e})"
        )));
    }
    Ok(ValueGap { lhs, rhs })
}

/// `J_n(pi) = sum_s nu_0(s) V_pi^{(n)}(s)`.
pub fn objective(
    mdp: &FiniteMdp,
    tables: &[PolicyTable],
    baseline: &PolicyTable,
    tau: f64,
    gamma: f64,
) -> Result<f64> {
    let n = tables.len();
    let eval = evaluate_policy(mdp, tables, baseline, tau, gamma)?;
    Ok(mdp
        .initial_dist()
        .iter()
        .enumerate()
        .map(|(s, &w)| w * eval.v(n, s))
        .sum())
}

/// Max violation of the log-sum-exp identity
/// `V*^{(i)}(s) = tau log sum_a baseline(a|s) exp(Q*^{(i)}(a,s)/tau)`
/// over all `(i, s)` of a solution; recomputed from the stored Q table.
pub fn lse_identity_max_err(sol: &SoftDpSolution, baseline: &PolicyTable) -> f64 {
    let mut worst = 0.0f64;
    for i in 1..=sol.horizon {
        for s in 0..baseline.n_states() {
            let q: Vec<f64> = (0..baseline.n_actions())
                .map(|a| sol.q(i, a, s))
                .collect();
            let vmax = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..baseline.n_actions())
                .map(|a| baseline.prob(a, s) * ((q[a] - vmax) / sol.tau).exp())
                .sum();
            let lse = vmax + sol.tau * z.ln();
            worst = worst.max((sol.v(i, s) - lse).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::policy::kl_divergence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn uniform_baseline(mdp: &FiniteMdp) -> PolicyTable {
        PolicyTable::uniform(mdp.n_states(), mdp.n_actions())
    }

    fn bandit(rewards: &[f64]) -> FiniteMdp {
        let na = rewards.len();
        FiniteMdp::new(
            1,
            na,
            vec![1.0; na],
            rewards.to_vec(),
            vec![1.0],
            vec![false],
        )
        .unwrap()
    }

    #[test]
    fn zero_reward_baseline_policy_has_zero_value() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut mdp = instances::random_mdp(4, 3, &mut rng);
        // zero out rewards
        let zero = FiniteMdp::new(
            4,
            3,
            (0..4)
                .flat_map(|s| (0..3).flat_map(move |a| (0..4).map(move |s2| (s, a, s2))))
                .map(|(s, a, s2)| mdp.p(s, a, s2))
                .collect(),
            vec![0.0; 12],
            mdp.initial_dist().to_vec(),
            vec![false; 4],
        )
        .unwrap();
        mdp = zero;
        let baseline = uniform_baseline(&mdp);
        let tables = vec![baseline.clone(); 3];
        let eval = evaluate_policy(&mdp, &tables, &baseline, 0.7, 1.0).unwrap();
        for i in 0..=3 {
            for s in 0..4 {
                assert!(eval.v(i, s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_state_one_step_matches_bandit_objective() {
        let mdp = bandit(&[0.8, -0.3]);
        let baseline = uniform_baseline(&mdp);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let pi = instances::random_policy_table(1, 2, &mut rng);
        let tau = 0.4;
        let eval = evaluate_policy(&mdp, &[pi.clone()], &baseline, tau, 1.0).unwrap();
        let expected_reward: f64 = (0..2).map(|a| pi.prob(a, 0) * mdp.reward(a, 0)).sum();
        let kl = kl_divergence(pi.row(0), baseline.row(0)).unwrap();
        assert!((eval.v(1, 0) - (expected_reward - tau * kl)).abs() < 1e-14);
    }

    /// Exhaustive path-sum oracle: sum over all action/state sequences,
    /// weighting per-path probability, with entropy terms per step.
    fn path_sum_value(
        mdp: &FiniteMdp,
        tables: &[PolicyTable],
        baseline: &PolicyTable,
        tau: f64,
        gamma: f64,
        depth: usize,
        s: usize,
    ) -> f64 {
        if depth == 0 {
            return 0.0;
        }
        let pi = &tables[depth - 1];
        let mut total = 0.0;
        for a in 0..mdp.n_actions() {
            let pa = pi.prob(a, s);
            let step = mdp.reward(a, s) - tau * (pa / baseline.prob(a, s)).ln();
            let mut cont = 0.0;
            for s2 in 0..mdp.n_states() {
                let p = mdp.p(s, a, s2);
                if p > 0.0 {
                    cont += p * path_sum_value(mdp, tables, baseline, tau, gamma, depth - 1, s2);
                }
            }
            total += pa * (step + gamma * cont);
        }
        total
    }

    #[test]
    fn evaluation_matches_exhaustive_path_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tables: Vec<PolicyTable> = (0..3)
            .map(|_| instances::random_policy_table(3, 2, &mut rng))
            .collect();
        let (tau, gamma) = (0.6, 1.0);
        let eval = evaluate_policy(&mdp, &tables, &baseline, tau, gamma).unwrap();
        for s in 0..3 {
            let want = path_sum_value(&mdp, &tables, &baseline, tau, gamma, 3, s);
            assert!(
                (eval.v(3, s) - want).abs() < 1e-12,
                "state {s}: {} vs {}",
                eval.v(3, s),
                want
            );
        }
    }

    #[test]
    fn bandit_optimal_policy_closed_form() {
        let mdp = bandit(&[1.0, 0.0]);
        let baseline = uniform_baseline(&mdp);
        let sol = solve_optimal(&mdp, &baseline, 1, 1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((sol.pi(1).prob(0, 0) - e / (1.0 + e)).abs() < 1e-12);
        assert!((sol.pi(1).prob(1, 0) - 1.0 / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_gives_baseline_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let base = instances::random_mdp(3, 2, &mut rng);
        let c = 0.37;
        let mdp = FiniteMdp::new(
            3,
            2,
            (0..3)
                .flat_map(|s| (0..2).flat_map(move |a| (0..3).map(move |s2| (s, a, s2))))
                .map(|(s, a, s2)| base.p(s, a, s2))
                .collect(),
            vec![c; 6],
            base.initial_dist().to_vec(),
            vec![false; 3],
        )
        .unwrap();
        let baseline = uniform_baseline(&mdp);
        let gamma = 0.9;
        let sol = solve_optimal(&mdp, &baseline, 4, 0.5, gamma).unwrap();
        for i in 1..=4 {
            assert!(sol.pi(i).max_abs_diff(&baseline) < 1e-12);
            let want: f64 = c * (0..i).map(|k| gamma.powi(k as i32)).sum::<f64>();
            for s in 0..3 {
                assert!((sol.v(i, s) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimal_policy_evaluation_reproduces_v_star() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mdp = instances::random_mdp(4, 3, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let sol = solve_optimal(&mdp, &baseline, 3, 0.3, 1.0).unwrap();
        let eval = evaluate_policy(&mdp, &sol.pi_star, &baseline, 0.3, 1.0).unwrap();
        for i in 0..=3 {
            for s in 0..4 {
                assert!((eval.v(i, s) - sol.v(i, s)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lse_identity_holds_for_solutions() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..5 {
            let mdp = instances::random_mdp(5, 3, &mut rng);
            let baseline = uniform_baseline(&mdp);
            let sol = solve_optimal(&mdp, &baseline, 4, 0.2, 1.0).unwrap();
            assert!(lse_identity_max_err(&sol, &baseline) < 1e-10);
        }
    }

    #[test]
    fn infinite_discounted_trivial_and_small_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);

        // r = 0 case
        let zero = FiniteMdp::new(
            3,
            2,
            (0..3)
                .flat_map(|s| (0..2).flat_map(move |a| (0..3).map(move |s2| (s, a, s2))))
                .map(|(s, a, s2)| mdp.p(s, a, s2))
                .collect(),
            vec![0.0; 6],
            mdp.initial_dist().to_vec(),
            vec![false; 3],
        )
        .unwrap();
        let (v, pi) = solve_infinite_discounted(&zero, &baseline, 0.5, 0.9, 1e-12).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-10));
        assert!(pi.max_abs_diff(&baseline) < 1e-10);

        // small gamma: pi_inf close to the one-step optimum
        let (_, pi_small) = solve_infinite_discounted(&mdp, &baseline, 0.5, 0.01, 1e-12).unwrap();
        let one = solve_optimal(&mdp, &baseline, 1, 0.5, 0.01).unwrap();
        let tv: f64 = (0..3)
            .map(|s| {
                (0..2)
                    .map(|a| (pi_small.prob(a, s) - one.pi(1).prob(a, s)).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn horizon_extension_converges_to_discounted_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mdp = instances::random_mdp(4, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let (tau, gamma) = (0.5, 0.9);
        let (_, pi_inf) = solve_infinite_discounted(&mdp, &baseline, tau, gamma, 1e-13).unwrap();

        let l1 = |n: usize| -> f64 {
            let sol = solve_optimal(&mdp, &baseline, n, tau, gamma).unwrap();
            (0..4)
                .map(|s| {
                    (0..2)
                        .map(|a| (sol.pi(n).prob(a, s) - pi_inf.prob(a, s)).abs())
                        .sum::<f64>()
                })
                .sum()
        };
        let mut prev = f64::INFINITY;
        for n in [5, 10, 20, 40, 60] {
            let d = l1(n);
            assert!(d <= prev + 1e-12, "distance increased at n={n}");
            prev = d;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn truncation_consistency_and_composition() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mdp = instances::random_mdp(4, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let sol5 = solve_optimal(&mdp, &baseline, 5, 0.4, 1.0).unwrap();

        // T_{n,n-1} drops exactly the last policy
        let t4 = truncate_solution(&sol5, 4).unwrap();
        assert_eq!(t4.horizon, 4);
        for i in 1..=4 {
            assert_eq!(t4.pi(i), sol5.pi(i));
        }

        // T_{n,m}(solve_optimal(n)) equals solve_optimal(m)
        let sol3 = solve_optimal(&mdp, &baseline, 3, 0.4, 1.0).unwrap();
        let t3 = truncate_solution(&sol5, 3).unwrap();
        for i in 1..=3 {
            assert!(t3.pi(i).max_abs_diff(sol3.pi(i)) < 1e-10);
            for s in 0..4 {
                assert!((t3.v(i, s) - sol3.v(i, s)).abs() < 1e-10);
            }
        }

        // composition T_{m,k} . T_{n,m} = T_{n,k}
        let via = truncate_solution(&truncate_solution(&sol5, 4).unwrap(), 2).unwrap();
        let direct = truncate_solution(&sol5, 2).unwrap();
        for i in 1..=2 {
            assert_eq!(via.pi(i), direct.pi(i));
        }

        assert!(truncate_solution(&sol5, 5).is_err());
    }

    #[test]
    fn value_gap_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mdp = instances::random_mdp(4, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let (tau, gamma) = (0.3, 1.0);

        // pi = pi*: both sides vanish
        let sol = solve_optimal(&mdp, &baseline, 3, tau, gamma).unwrap();
        let gap = value_gap(&mdp, &sol.pi_star, &baseline, tau, gamma, 1e-9).unwrap();
        for (l, r) in gap.lhs.iter().zip(&gap.rhs) {
            assert!(l.abs() < 1e-10 && r.abs() < 1e-10);
        }

        // n = 1: gap(s) = -tau KL(pi || pi*)(s)
        let pi1 = instances::random_policy_table(4, 2, &mut rng);
        let gap1 = value_gap(&mdp, &[pi1.clone()], &baseline, tau, gamma, 1e-9).unwrap();
        let sol1 = solve_optimal(&mdp, &baseline, 1, tau, gamma).unwrap();
        for s in 0..4 {
            let want = -tau * kl_divergence(pi1.row(s), sol1.pi(1).row(s)).unwrap();
            assert!((gap1.lhs[s] - want).abs() < 1e-12);
        }

        // random policy, n = 3: the identity check inside value_gap passes
        let tables: Vec<PolicyTable> = (0..3)
            .map(|_| instances::random_policy_table(4, 2, &mut rng))
            .collect();
        value_gap(&mdp, &tables, &baseline, tau, gamma, 1e-9).unwrap();
    }

    #[test]
    fn optimal_objective_dominates() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mdp = instances::random_mdp(4, 3, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let (tau, gamma) = (0.5, 1.0);
        let sol = solve_optimal(&mdp, &baseline, 3, tau, gamma).unwrap();
        let j_star = objective(&mdp, &sol.pi_star, &baseline, tau, gamma).unwrap();
        for _ in 0..100 {
            let tables: Vec<PolicyTable> = (0..3)
                .map(|_| instances::random_policy_table(4, 3, &mut rng))
                .collect();
            let j = objective(&mdp, &tables, &baseline, tau, gamma).unwrap();
            assert!(j <= j_star + 1e-10);
        }
    }
}
