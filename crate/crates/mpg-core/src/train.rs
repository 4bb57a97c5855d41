//! Nested policy-gradient training: the sampled update, the exact
//! (ideal) update, the multiple-updates-per-path variant, decay
//! schedules, and the episode loop.
//!
//! The sampled update touches each parameter block once per trajectory;
//! its expectation equals the exact gradient (checked statistically in
//! the tests). The ideal update computes that gradient in closed form by
//! propagating state laws through the MDP.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{MpgError, Result};
use crate::mdp::{propagate, sample_trajectory, FiniteMdp, StateDistribution, Trajectory};
use crate::policy::ExtendedPolicy;
use crate::softdp::evaluate_policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateVariant {
    Sampled,
    Ideal,
    Multi,
}

/// Baseline value `v_t` subtracted from the return in the sampled
/// update. The baseline only depends on earlier episodes, so it leaves
/// the update's expectation unchanged while centering the returns.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineValue {
    Zero,
    Constant(f64),
    /// Per-block exponential moving average of the observed returns
    /// `C_i`, updated after each episode.
    RunningMean { decay: f64 },
}

/// Per-block baseline state carried across episodes.
#[derive(Debug, Clone)]
pub struct BaselineState {
    kind: BaselineValue,
    means: Vec<f64>,
    /// EMA normalizer for bias correction while warm-starting from zero.
    weight: f64,
}

impl BaselineState {
    pub fn new(kind: BaselineValue, horizon: usize) -> Self {
        BaselineState {
            kind,
            means: vec![0.0; horizon],
            weight: 0.0,
        }
    }

    /// Baseline for block `i` (1-based).
    pub fn value(&self, i: usize) -> f64 {
        match self.kind {
            BaselineValue::Zero => 0.0,
            BaselineValue::Constant(c) => c,
            BaselineValue::RunningMean { .. } => {
                if self.weight == 0.0 {
                    0.0
                } else {
                    self.means[i - 1] / self.weight
                }
            }
        }
    }

    /// All-zero baseline (no centering).
    pub fn zero(horizon: usize) -> Self {
        Self::new(BaselineValue::Zero, horizon)
    }

    /// Feeds this episode's observed returns into the moving average.
    pub fn observe(&mut self, returns: &[f64]) {
        if let BaselineValue::RunningMean { decay } = self.kind {
            self.weight = decay * self.weight + (1.0 - decay);
            for (m, c) in self.means.iter_mut().zip(returns) {
                *m = decay * *m + (1.0 - decay) * c;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub horizon: usize,
    pub episodes: usize,
    pub eta0: f64,
    pub eta_terminal: f64,
    pub tau0: f64,
    pub tau_terminal: f64,
    pub gamma: f64,
    /// Norm of the tabular feature vectors; the induced kernel is
    /// `feature_scale^2 * I`, so this multiplies the effective step size
    /// in preference space without changing the parameter-space rule.
    pub feature_scale: f64,
    pub variant: UpdateVariant,
    pub baseline_value: BaselineValue,
    /// Importance-weight ceiling for the multi variant.
    pub clip_ceiling: f64,
    pub seed: u64,
    /// Trajectories per episode; 1 matches the reference loop.
    pub batch: usize,
    /// Compute the exact objective every this many episodes (0 = never).
    pub exact_log_every: usize,
}

impl TrainConfig {
    pub fn new(horizon: usize, episodes: usize) -> Self {
        TrainConfig {
            horizon,
            episodes,
            eta0: 0.1,
            eta_terminal: 0.1,
            tau0: 0.5,
            tau_terminal: 0.5,
            gamma: 1.0,
            feature_scale: 1.0,
            variant: UpdateVariant::Sampled,
            baseline_value: BaselineValue::Zero,
            clip_ceiling: 10.0,
            seed: 0,
            batch: 1,
            exact_log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(MpgError::Config("horizon must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(MpgError::Config("episodes must be >= 1".into()));
        }
        for (name, v) in [
            ("eta0", self.eta0),
            ("eta_terminal", self.eta_terminal),
            ("tau0", self.tau0),
            ("tau_terminal", self.tau_terminal),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(MpgError::Config(format!("{name} must be positive")));
            }
        }
        if self.eta0 == 0.0 && self.eta_terminal == 0.0 {
            return Err(MpgError::Config("learning rate must be positive".into()));
        }
        if self.gamma < 0.0 || self.gamma > 1.0 {
            return Err(MpgError::Config("gamma must lie in [0, 1]".into()));
        }
        if self.feature_scale <= 0.0 || !self.feature_scale.is_finite() {
            return Err(MpgError::Config("feature_scale must be positive".into()));
        }
        if self.clip_ceiling < 1.0 {
            return Err(MpgError::Config("clip ceiling must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(MpgError::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one update application did: per-step parameter deltas, the
/// returns that drove them, and diagnostic norms.
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    /// `deltas[i-1]` is the change applied to `theta^{(i)}`.
    pub deltas: Vec<Vec<f64>>,
    /// `C_i` for trajectory-driven variants; zeros for the ideal update.
    pub returns: Vec<f64>,
    /// Euclidean norm of each delta.
    pub norms: Vec<f64>,
    /// Importance weights clipped at the ceiling (multi variant only).
    pub clipped: u64,
}

impl UpdateRecord {
    fn from_deltas(deltas: Vec<Vec<f64>>, returns: Vec<f64>, clipped: u64) -> Self {
        let norms = deltas
            .iter()
            .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        UpdateRecord {
            deltas,
            returns,
            norms,
            clipped,
        }
    }
}

fn check_traj(policy: &ExtendedPolicy, traj: &Trajectory) -> Result<()> {
    let n = policy.horizon();
    if traj.horizon() != n || traj.states.len() < n || traj.rewards.len() != n {
        return Err(MpgError::DimensionMismatch(format!(
            "trajectory horizon {} does not match policy horizon {n}",
            traj.horizon()
        )));
    }
    Ok(())
}

/// One nested update from a single trajectory:
///
/// `C_i = sum_{l=n-i}^{n-1} gamma^{l-(n-i)} [R_l - tau log(pi^{(n-l)}(A_l|S_l) / baseline(A_l|S_l))]`,
/// `theta^{(i)} += eta gamma^{n-i} (C_i - v_t) grad log pi^{(i)}(A_{n-i}|S_{n-i})`.
///
/// With `gamma = 1` both discount factors drop out. The `gamma^{n-i}`
/// prefactor keeps the estimator unbiased for the discounted objective
/// (it matches the prefactor of the exact gradient). `v_t` comes from
/// earlier episodes only, so it does not bias the update.
pub fn mpg_sampled_update(
    policy: &mut ExtendedPolicy,
    traj: &Trajectory,
    eta: f64,
    tau: f64,
    gamma: f64,
    v_t: &BaselineState,
) -> Result<UpdateRecord> {
    check_traj(policy, traj)?;
    let n = policy.horizon();

    // per-transition regularized rewards, computed before any block moves
    let mut step_terms = vec![0.0; n];
    let mut dists = Vec::with_capacity(n);
    for l in 0..n {
        let (s, a) = (traj.states[l], traj.actions[l]);
        let step = policy.step(n - l);
        let probs = step.action_distribution(s);
        let ratio = probs[a] / step.baseline().prob(a, s);
        step_terms[l] = traj.rewards[l] - tau * ratio.ln();
        dists.push(probs);
    }

    let mut deltas = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    let mut c = 0.0;
    for i in 1..=n {
        // window-relative discounting: C_i = X_{n-i} + gamma C_{i-1}
        c = step_terms[n - i] + gamma * c;
        returns.push(c);
        let (s, a) = (traj.states[n - i], traj.actions[n - i]);
        let step = policy.step(i);
        let mut delta = vec![0.0; step.theta.len()];
        let disc = gamma.powi((n - i) as i32);
        step.accumulate_log_grad(&mut delta, eta * disc * (c - v_t.value(i)), a, s, &dists[n - i]);
        deltas.push(delta);
    }
    for i in 1..=n {
        let theta = &mut policy.step_mut(i).theta;
        for (t, d) in theta.iter_mut().zip(&deltas[i - 1]) {
            *t += d;
        }
    }
    Ok(UpdateRecord::from_deltas(deltas, returns, 0))
}

/// Exact gradient of `J_n` for each parameter block:
///
/// `grad_{theta^{(i)}} J_n = gamma^{n-i} sum_s m^{(i)}(s) sum_a pi^{(i)}(a|s)
///    [Q^{(i)}(a,s) - tau log(pi^{(i)}/baseline)(a|s) - V^{(i)}(s)]
///    grad log pi^{(i)}(a|s)`,
///
/// with `m^{(i)}` the exact law of the state seen by `pi^{(i)}`.
/// Applies `theta^{(i)} += eta * grad`.
pub fn mpg_ideal_update(
    mdp: &FiniteMdp,
    policy: &mut ExtendedPolicy,
    eta: f64,
    tau: f64,
    gamma: f64,
) -> Result<UpdateRecord> {
    let n = policy.horizon();
    let tables = policy.tables();
    let baseline = policy.step(1).baseline().clone();
    let eval = evaluate_policy(mdp, &tables, &baseline, tau, gamma)?;

    let mut deltas = vec![Vec::new(); n];
    let mut dist = StateDistribution(mdp.initial_dist().to_vec());
    // walk i = n, n-1, ..., 1; m^{(n)} = nu_0, then push the law forward
    for i in (1..=n).rev() {
        let step = policy.step(i);
        let table = &tables[i - 1];
        let disc = gamma.powi((n - i) as i32);
        let mut grad = vec![0.0; step.theta.len()];
        for (s, &m) in dist.probs().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let probs = table.row(s);
            for a in 0..mdp.n_actions() {
                let pa = probs[a];
                if pa == 0.0 {
                    continue;
                }
                let adv = eval.q(i, a, s)
                    - tau * (pa / baseline.prob(a, s)).ln()
                    - eval.v(i, s);
                step.accumulate_log_grad(&mut grad, disc * m * pa * adv, a, s, probs);
            }
        }
        for g in &mut grad {
            *g *= eta;
        }
        deltas[i - 1] = grad;
        if i > 1 {
            dist = propagate(mdp, &dist, table)?;
        }
    }
    for i in 1..=n {
        let theta = &mut policy.step_mut(i).theta;
        for (t, d) in theta.iter_mut().zip(&deltas[i - 1]) {
            *t += d;
        }
    }
    Ok(UpdateRecord::from_deltas(deltas, vec![0.0; n], 0))
}

/// Every-window variant: block `i` is updated from every length-`i`
/// window of the trajectory, reweighted to correct for the actions
/// having been sampled under the wrong step policies:
///
/// `theta^{(i)} += eta gamma^{n-i} sum_{k=0}^{n-i} rho_{i,k} C_{k,i} grad log pi^{(i)}(A_k|S_k)`,
/// `rho_{i,k} = prod_{l=0}^{i-1} pi^{(i-l)}(A_{k+l}|S_{k+l}) / pi^{(n-k-l)}(A_{k+l}|S_{k+l})`,
/// `C_{k,i} = sum_{l=0}^{i-1} gamma^l [R_{k+l} - tau log(pi^{(i-l)}(A_{k+l}|S_{k+l}) / baseline(...))]`.
///
/// With `gamma = 1` the discount factors drop out. Weights above
/// `clip_ceiling` are clipped and counted.
pub fn mpg_multi_update(
    policy: &mut ExtendedPolicy,
    traj: &Trajectory,
    eta: f64,
    tau: f64,
    gamma: f64,
    clip_ceiling: f64,
) -> Result<UpdateRecord> {
    check_traj(policy, traj)?;
    let n = policy.horizon();

    // p[j-1][l] = pi^{(j)}(A_l | S_l), all step policies at all transitions
    let mut p = vec![vec![0.0; n]; n];
    for l in 0..n {
        let s = traj.states[l];
        let a = traj.actions[l];
        for j in 1..=n {
            p[j - 1][l] = policy.step(j).action_distribution(s)[a];
        }
    }

    let baseline = policy.step(1).baseline().clone();
    let mut deltas = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    let mut clipped = 0u64;
    for i in 1..=n {
        let step = policy.step(i);
        let mut delta = vec![0.0; step.theta.len()];
        let disc = gamma.powi((n - i) as i32);
        let mut c_last = 0.0;
        for k in 0..=(n - i) {
            let mut rho = 1.0;
            let mut c = 0.0;
            for l in 0..i {
                let t = k + l; // transition index
                let num = p[i - l - 1][t];
                let den = p[n - t - 1][t];
                rho *= num / den;
                let (s, a) = (traj.states[t], traj.actions[t]);
                c += gamma.powi(l as i32)
                    * (traj.rewards[l + k] - tau * (num / baseline.prob(a, s)).ln());
                debug_assert_eq!((s, a), (traj.states[t], traj.actions[t]));
            }
            if k == n - i {
                // the on-policy window: the product telescopes to 1
                rho = 1.0;
                c_last = c;
            } else if rho > clip_ceiling {
                rho = clip_ceiling;
                clipped += 1;
            }
            let (s, a) = (traj.states[k], traj.actions[k]);
            let probs = step.action_distribution(s);
            step.accumulate_log_grad(&mut delta, eta * disc * rho * c, a, s, &probs);
        }
        returns.push(c_last);
        deltas.push(delta);
    }
    for i in 1..=n {
        let theta = &mut policy.step_mut(i).theta;
        for (t, d) in theta.iter_mut().zip(&deltas[i - 1]) {
            *t += d;
        }
    }
    Ok(UpdateRecord::from_deltas(deltas, returns, clipped))
}

/// Per-episode exponential decay multiplier taking `x_0` to `x_T` in
/// `episodes` steps: `d = (x_T / x_0)^{1/episodes}`.
pub fn decay_schedule(x0: f64, x_terminal: f64, episodes: usize) -> Result<f64> {
    if x0 <= 0.0 || x_terminal <= 0.0 {
        return Err(MpgError::InvalidArgument(
            "decay endpoints must be positive".into(),
        ));
    }
    if episodes == 0 {
        return Err(MpgError::InvalidArgument("episodes must be >= 1".into()));
    }
    Ok((x_terminal / x0).powf(1.0 / episodes as f64))
}

/// One CSV row of training telemetry.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub episode: usize,
    /// Exact `J_n` when computed this episode.
    pub j_exact: Option<f64>,
    /// Undiscounted reward accumulated along the episode's trajectory
    /// (for the ideal variant, the exact expected value).
    pub cum_reward: f64,
    pub eta: f64,
    pub tau: f64,
    pub update_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub clip_total: u64,
    pub episodes_run: usize,
}

impl TrainLog {
    /// Deterministic CSV rendering; floats are written with `{:.12e}`.
    pub fn to_csv(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.update_norms.len());
        let mut out = String::from("episode,j_exact,cum_reward,eta,tau");
        for i in 1..=n {
            out.push_str(&format!(",norm_{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.episode.to_string());
            out.push(',');
            if let Some(j) = r.j_exact {
                out.push_str(&format!("{j:.12e}"));
            }
            out.push_str(&format!(",{:.12e},{:.12e},{:.12e}", r.cum_reward, r.eta, r.tau));
            for v in &r.update_norms {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The training loop: per episode, draw a trajectory under the current
/// extended policy (trajectory-driven variants), apply the configured
/// update for every block, then decay `eta` and `tau`.
///
/// Aborts with a diagnostic if any parameter magnitude passes 1e6.
pub fn train(mdp: &FiniteMdp, config: &TrainConfig) -> Result<(ExtendedPolicy, TrainLog)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut policy = if config.feature_scale == 1.0 {
        ExtendedPolicy::for_mdp(mdp, config.horizon, config.tau0)
    } else {
        ExtendedPolicy::for_mdp_scaled(mdp, config.horizon, config.tau0, config.feature_scale)?
    };
    train_from(mdp, &mut policy, config, &mut rng).map(|log| (policy, log))
}

/// Same loop on a caller-supplied starting policy and RNG.
pub fn train_from(
    mdp: &FiniteMdp,
    policy: &mut ExtendedPolicy,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TrainLog> {
    config.validate()?;
    if policy.horizon() != config.horizon {
        return Err(MpgError::DimensionMismatch(
            "policy horizon does not match config".into(),
        ));
    }
    let d_eta = decay_schedule(config.eta0, config.eta_terminal, config.episodes)?;
    let d_tau = decay_schedule(config.tau0, config.tau_terminal, config.episodes)?;
    let baseline = policy.step(1).baseline().clone();

    let mut eta = config.eta0;
    let mut tau = config.tau0;
    let mut log = TrainLog::default();
    let mut v_t = BaselineState::new(config.baseline_value, config.horizon);
    for episode in 0..config.episodes {
        policy.set_tau(tau);
        let mut norms = vec![0.0; config.horizon];
        let mut cum_reward = 0.0;
        for _ in 0..config.batch {
            let record = match config.variant {
                UpdateVariant::Sampled => {
                    let traj = sample_trajectory(mdp, policy, rng);
                    cum_reward += traj.rewards.iter().sum::<f64>();
                    let rec = mpg_sampled_update(policy, &traj, eta, tau, config.gamma, &v_t)?;
                    v_t.observe(&rec.returns);
                    rec
                }
                UpdateVariant::Multi => {
                    let traj = sample_trajectory(mdp, policy, rng);
                    cum_reward += traj.rewards.iter().sum::<f64>();
                    mpg_multi_update(policy, &traj, eta, tau, config.gamma, config.clip_ceiling)?
                }
                UpdateVariant::Ideal => {
                    mpg_ideal_update(mdp, policy, eta, tau, config.gamma)?
                }
            };
            log.clip_total += record.clipped;
            for (acc, v) in norms.iter_mut().zip(&record.norms) {
                *acc += v;
            }
        }
        cum_reward /= config.batch as f64;

        let j_exact = if config.exact_log_every > 0 && episode % config.exact_log_every == 0 {
            Some(crate::softdp::objective(
                mdp,
                &policy.tables(),
                &baseline,
                tau,
                config.gamma,
            )?)
        } else {
            None
        };
        if config.variant == UpdateVariant::Ideal {
            cum_reward = j_exact.unwrap_or(f64::NAN);
        }
        log.rows.push(LogRow {
            episode,
            j_exact,
            cum_reward,
            eta,
            tau,
            update_norms: norms,
        });

        let worst = policy.max_theta_abs();
        if !worst.is_finite() || worst > 1e6 {
            return Err(MpgError::Divergence(worst));
        }
        eta *= d_eta;
        tau *= d_tau;
        log.episodes_run = episode + 1;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::policy::PolicyTable;
    use crate::softdp::{objective, solve_optimal};
    use rand::Rng;

    fn uniform_baseline(mdp: &FiniteMdp) -> PolicyTable {
        PolicyTable::uniform(mdp.n_states(), mdp.n_actions())
    }

    /// Sets a tabular extended policy to exactly reproduce the given
    /// tables: theta(a,s) = tau * log(table / baseline).
    fn pin_to_tables(policy: &mut ExtendedPolicy, tables: &[PolicyTable]) {
        let tau = policy.tau();
        let ns = tables[0].n_states();
        let na = tables[0].n_actions();
        for i in 1..=policy.horizon() {
            let grid = policy.step(i).features().clone();
            let base = policy.step(i).baseline().clone();
            for s in 0..ns {
                for a in 0..na {
                    let idx = grid.grid_index(a, s);
                    policy.step_mut(i).theta[idx] =
                        tau * (tables[i - 1].prob(a, s) / base.prob(a, s)).ln();
                }
            }
        }
    }

    #[test]
    fn zero_reward_baseline_trajectory_gives_no_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let base = instances::random_mdp(3, 2, &mut rng);
        let mdp = FiniteMdp::new(
            3,
            2,
            (0..3)
                .flat_map(|s| (0..2).flat_map(move |a| (0..3).map(move |s2| (s, a, s2))))
                .map(|(s, a, s2)| base.p(s, a, s2))
                .collect(),
            vec![0.0; 6],
            base.initial_dist().to_vec(),
            vec![false; 3],
        )
        .unwrap();
        let mut policy = ExtendedPolicy::for_mdp(&mdp, 3, 0.5);
        let traj = sample_trajectory(&mdp, &policy, &mut rng);
        let rec = mpg_sampled_update(&mut policy, &traj, 0.1, 0.5, 1.0, &BaselineState::zero(3)).unwrap();
        for (c, norm) in rec.returns.iter().zip(&rec.norms) {
            assert!(c.abs() < 1e-14 && norm.abs() < 1e-14);
        }
        assert!(policy.max_theta_abs() < 1e-14);
    }

    #[test]
    fn sampled_update_touches_only_window_transitions() {
        // move one reward outside pi^{(1)}'s window; its C_1 must not change
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let policy0 = instances::random_tabular_policy(&mdp, 3, 0.5, &mut rng);
        let traj = sample_trajectory(&mdp, &policy0, &mut rng);

        let mut a = policy0.clone();
        let rec_a = mpg_sampled_update(&mut a, &traj, 0.1, 0.5, 1.0, &BaselineState::zero(3)).unwrap();

        let mut traj2 = traj.clone();
        traj2.rewards[0] += 5.0; // index 0 is outside [n-1, n-1] for i=1..n-1? no: it IS in windows i=n only
        let mut b = policy0.clone();
        let rec_b = mpg_sampled_update(&mut b, &traj2, 0.1, 0.5, 1.0, &BaselineState::zero(3)).unwrap();

        // C_i for i < n unchanged; C_n shifted by exactly 5
        for i in 0..2 {
            assert!((rec_a.returns[i] - rec_b.returns[i]).abs() < 1e-14);
        }
        assert!((rec_b.returns[2] - rec_a.returns[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ideal_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let policy0 = instances::random_tabular_policy(&mdp, 3, 0.5, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let (tau, eta) = (0.5, 1.0);

        for gamma in [1.0, 0.9] {
            let mut pol = policy0.clone();
            let rec = mpg_ideal_update(&mdp, &mut pol, eta, tau, gamma).unwrap();

            let h = 1e-5;
            for i in 1..=3 {
                for k in 0..policy0.step(i).theta.len() {
                    let mut plus = policy0.clone();
                    plus.step_mut(i).theta[k] += h;
                    let mut minus = policy0.clone();
                    minus.step_mut(i).theta[k] -= h;
                    let jp = objective(&mdp, &plus.tables(), &baseline, tau, gamma).unwrap();
                    let jm = objective(&mdp, &minus.tables(), &baseline, tau, gamma).unwrap();
                    let fd = (jp - jm) / (2.0 * h);
                    let exact = rec.deltas[i - 1][k] / eta;
                    let denom = exact.abs().max(1e-6);
                    assert!(
                        (fd - exact).abs() / denom < 1e-5,
                        "gamma {gamma} block {i} component {k}: fd {fd} vs exact {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn ideal_gradient_vanishes_at_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mdp = instances::random_mdp(4, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tau = 0.5;
        let sol = solve_optimal(&mdp, &baseline, 3, tau, 1.0).unwrap();
        let mut policy = ExtendedPolicy::for_mdp(&mdp, 3, tau);
        pin_to_tables(&mut policy, &sol.pi_star);
        let rec = mpg_ideal_update(&mdp, &mut policy, 1.0, tau, 1.0).unwrap();
        for norm in rec.norms {
            assert!(norm < 1e-9, "gradient norm {norm} at the optimum");
        }
    }

    #[test]
    fn single_state_ideal_update_is_bandit_update() {
        // one state: gradient reduces to pi(a)[r(a) - tau log(pi/base)(a) - V]
        let mdp = FiniteMdp::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0],
            vec![false],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut policy = instances::random_tabular_policy(&mdp, 1, 0.7, &mut rng);
        let tau = 0.7;
        let probs = policy.step(1).action_distribution(0);
        let v: f64 = (0..2)
            .map(|a| probs[a] * (mdp.reward(a, 0) - tau * (probs[a] / 0.5).ln()))
            .sum();
        let coeff: Vec<f64> = (0..2)
            .map(|a| probs[a] * (mdp.reward(a, 0) - tau * (probs[a] / 0.5).ln() - v))
            .collect();
        // expected tabular gradient component for theta_a:
        // (1/tau) sum_b coeff_b (delta_ab - pi_a)
        let mut want = vec![0.0; 2];
        for b in 0..2 {
            for a in 0..2 {
                want[a] += coeff[b] * ((if a == b { 1.0 } else { 0.0 }) - probs[a]) / tau;
            }
        }
        let rec = mpg_ideal_update(&mdp, &mut policy, 1.0, tau, 1.0).unwrap();
        for a in 0..2 {
            assert!((rec.deltas[0][a] - want[a]).abs() < 1e-12);
        }
    }

    /// Doubly stochastic MDP (circulant rows): the state law stays
    /// uniform under any policy, which makes every window of the multi
    /// update an unbiased gradient estimate.
    fn circulant_mdp<R: Rng + ?Sized>(ns: usize, na: usize, rng: &mut R) -> FiniteMdp {
        let mut transition = vec![0.0; ns * na * ns];
        for a in 0..na {
            let w = instances::random_simplex(ns, rng);
            for s in 0..ns {
                for d in 0..ns {
                    transition[(s * na + a) * ns + (s + d) % ns] = w[d];
                }
            }
        }
        let mean_reward: Vec<f64> = (0..na * ns).map(|_| rng.random_range(-1.0..1.0)).collect();
        FiniteMdp::new(
            ns,
            na,
            transition,
            mean_reward,
            vec![1.0 / ns as f64; ns],
            vec![false; ns],
        )
        .unwrap()
    }

    #[test]
    fn sampled_update_is_unbiased() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mdp = instances::random_mdp(2, 2, &mut rng);
        let policy0 = instances::random_tabular_policy(&mdp, 2, 0.6, &mut rng);
        // gamma < 1 exercises both the window discount and the gamma^{n-i}
        // prefactor; the gamma = 1 case is covered by the larger check in
        // the verification suite
        let (tau, eta, gamma) = (0.6, 1.0, 0.9);

        let mut ideal = policy0.clone();
        let want = mpg_ideal_update(&mdp, &mut ideal, eta, tau, gamma).unwrap();

        let trials = 100_000usize;
        let dim = policy0.step(1).theta.len();
        let mut mean = vec![vec![0.0; dim]; 2];
        let mut m2 = vec![vec![0.0; dim]; 2];
        for t in 0..trials {
            let traj = sample_trajectory(&mdp, &policy0, &mut rng);
            let mut p = policy0.clone();
            let rec = mpg_sampled_update(&mut p, &traj, eta, tau, gamma, &BaselineState::zero(2)).unwrap();
            for i in 0..2 {
                for k in 0..dim {
                    let x = rec.deltas[i][k];
                    let d = x - mean[i][k];
                    mean[i][k] += d / (t + 1) as f64;
                    m2[i][k] += d * (x - mean[i][k]);
                }
            }
        }
        for i in 0..2 {
            for k in 0..dim {
                let se = (m2[i][k] / (trials as f64 * (trials - 1) as f64)).sqrt();
                let gap = (mean[i][k] - want.deltas[i][k]).abs();
                assert!(
                    gap <= 3.0 * se + 1e-12,
                    "block {} component {k}: gap {gap:.3e} > 3 se {:.3e}",
                    i + 1,
                    3.0 * se
                );
            }
        }
    }

    #[test]
    fn multi_update_reduces_to_sampled_on_last_window() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let policy0 = instances::random_tabular_policy(&mdp, 3, 0.5, &mut rng);
        let traj = sample_trajectory(&mdp, &policy0, &mut rng);
        let n = 3;

        let mut a = policy0.clone();
        let sampled = mpg_sampled_update(&mut a, &traj, 0.1, 0.5, 1.0, &BaselineState::zero(3)).unwrap();
        let mut b = policy0.clone();
        let multi = mpg_multi_update(&mut b, &traj, 0.1, 0.5, 1.0, 10.0).unwrap();

        // block n has a single window (k = 0) with weight exactly 1
        assert_eq!(multi.clipped, 0);
        for k in 0..policy0.step(n).theta.len() {
            assert!((multi.deltas[n - 1][k] - sampled.deltas[n - 1][k]).abs() < 1e-12);
        }
        // the on-policy window return equals the sampled return for each block
        for i in 0..n {
            assert!((multi.returns[i] - sampled.returns[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_update_with_identical_blocks_is_unbiased() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mdp = circulant_mdp(3, 2, &mut rng);
        let tau = 0.7;
        // identical step policies (weights exactly 1) that are also
        // state-independent, so the combined state kernel stays doubly
        // stochastic and every S_k is uniform
        let prefs: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut policy0 = ExtendedPolicy::for_mdp(&mdp, 3, tau);
        for i in 1..=3 {
            let grid = policy0.step(i).features().clone();
            for s in 0..3 {
                for a in 0..2 {
                    policy0.step_mut(i).theta[grid.grid_index(a, s)] = prefs[a];
                }
            }
        }
        let n = 3;

        let mut ideal = policy0.clone();
        let want = mpg_ideal_update(&mdp, &mut ideal, 1.0, tau, 1.0).unwrap();

        let trials = 100_000usize;
        let dim = policy0.step(1).theta.len();
        let mut mean = vec![vec![0.0; dim]; n];
        let mut m2 = vec![vec![0.0; dim]; n];
        for t in 0..trials {
            let traj = sample_trajectory(&mdp, &policy0, &mut rng);
            let mut p = policy0.clone();
            let rec = mpg_multi_update(&mut p, &traj, 1.0, tau, 1.0, 1e18).unwrap();
            for i in 0..n {
                for k in 0..dim {
                    // each of the (n - i) extra windows adds one more
                    // unbiased gradient sample; normalize by the count
                    let x = rec.deltas[i][k] / (n - i) as f64; // i is 0-based here: blocks i+1 has n-i windows
                    let d = x - mean[i][k];
                    mean[i][k] += d / (t + 1) as f64;
                    m2[i][k] += d * (x - mean[i][k]);
                }
            }
        }
        for i in 0..n {
            for k in 0..dim {
                let se = (m2[i][k] / (trials as f64 * (trials - 1) as f64)).sqrt();
                let gap = (mean[i][k] - want.deltas[i][k]).abs();
                assert!(
                    gap <= 3.0 * se + 1e-12,
                    "block {} component {k}: gap {gap:.3e} > 3 se {:.3e}",
                    i + 1,
                    3.0 * se
                );
            }
        }
    }

    #[test]
    fn multi_update_clips_and_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let mut policy = ExtendedPolicy::for_mdp(&mdp, 3, 1.0);
        // adjacent blocks prefer opposite actions, so an off-policy window
        // occasionally sees an action that is ~50x likelier under the
        // target block than under the behavior block
        for i in 1..=3 {
            let grid = policy.step(i).features().clone();
            for s in 0..3 {
                for a in 0..2 {
                    policy.step_mut(i).theta[grid.grid_index(a, s)] =
                        if a == i % 2 { 2.0 } else { -2.0 };
                }
            }
        }
        let mut total = 0;
        for _ in 0..500 {
            let traj = sample_trajectory(&mdp, &policy, &mut rng);
            let mut p = policy.clone();
            let rec = mpg_multi_update(&mut p, &traj, 0.01, 1.0, 1.0, 10.0).unwrap();
            total += rec.clipped;
        }
        assert!(total > 0, "expected at least one clipped weight");
    }

    #[test]
    fn decay_schedule_properties() {
        assert_eq!(decay_schedule(0.5, 0.5, 100).unwrap(), 1.0);
        let d = decay_schedule(0.4, 0.03, 1000).unwrap();
        assert!((d - 0.997414).abs() < 2e-6, "d = {d}");
        assert!((d - (0.03f64 / 0.4).powf(1e-3)).abs() < 1e-15);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..50 {
            let x0: f64 = rng.random_range(0.01..10.0);
            let xt: f64 = rng.random_range(0.01..10.0);
            let eps: usize = rng.random_range(1..5000);
            let d = decay_schedule(x0, xt, eps).unwrap();
            let end = x0 * d.powi(eps as i32);
            assert!((end - xt).abs() / xt < 1e-9);
        }
        assert!(decay_schedule(0.0, 1.0, 10).is_err());
        assert!(decay_schedule(1.0, -1.0, 10).is_err());
        assert!(decay_schedule(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn ideal_training_reaches_the_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mdp = instances::random_mdp(4, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tau = 0.5;
        let sol = solve_optimal(&mdp, &baseline, 3, tau, 1.0).unwrap();

        let mut config = TrainConfig::new(3, 20_000);
        config.variant = UpdateVariant::Ideal;
        config.eta0 = 0.5;
        config.eta_terminal = 0.5;
        config.tau0 = tau;
        config.tau_terminal = tau;
        config.exact_log_every = 0;
        let (policy, log) = train(&mdp, &config).unwrap();
        assert!(log.episodes_run <= 50_000);
        let mut worst = 0.0f64;
        for i in 1..=3 {
            worst = worst.max(policy.step(i).as_table().max_abs_diff(sol.pi(i)));
        }
        assert!(worst < 1e-3, "policy gap {worst}");
    }

    #[test]
    fn sampled_training_solves_the_bandit() {
        let mdp = FiniteMdp::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0],
            vec![false],
        )
        .unwrap();
        let e = std::f64::consts::E;
        let optimal = [e / (1.0 + e), 1.0 / (1.0 + e)];

        let mut config = TrainConfig::new(1, 20_000);
        config.variant = UpdateVariant::Sampled;
        config.eta0 = 0.2;
        config.eta_terminal = 0.01;
        config.tau0 = 1.0;
        config.tau_terminal = 1.0;
        config.seed = 12;
        config.exact_log_every = 0;
        let (policy, _) = train(&mdp, &config).unwrap();
        let dist = policy.step(1).action_distribution(0);
        let tv: f64 = dist
            .iter()
            .zip(&optimal)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let mut config = TrainConfig::new(2, 50);
        config.eta0 = 1e-300; // effectively zero while staying positive
        config.eta_terminal = 1e-300;
        config.exact_log_every = 1;
        let (policy, log) = train(&mdp, &config).unwrap();
        assert!(policy.max_theta_abs() < 1e-290);
        let first = log.rows[0].j_exact.unwrap();
        for row in &log.rows {
            assert!((row.j_exact.unwrap() - first).abs() < 1e-9);
        }
    }

    #[test]
    fn ideal_updates_ascend_monotonically_for_small_eta() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let mdp = instances::random_mdp(4, 3, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tau = 0.3;
        let policy0 = instances::random_tabular_policy(&mdp, 3, tau, &mut rng);

        // halve eta until 200 consecutive steps are monotone
        let mut eta = 0.5;
        'outer: for _ in 0..12 {
            let mut policy = policy0.clone();
            let mut prev = objective(&mdp, &policy.tables(), &baseline, tau, 1.0).unwrap();
            for _ in 0..200 {
                mpg_ideal_update(&mdp, &mut policy, eta, tau, 1.0).unwrap();
                let j = objective(&mdp, &policy.tables(), &baseline, tau, 1.0).unwrap();
                if j < prev - 1e-12 {
                    eta *= 0.5;
                    continue 'outer;
                }
                prev = j;
            }
            return; // found a monotone eta
        }
        panic!("no learning rate in the halving range gave monotone ascent");
    }

    #[test]
    fn stationary_point_of_ideal_update_is_the_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tau = 0.5;
        let mut policy = instances::random_tabular_policy(&mdp, 2, tau, &mut rng);
        // run to stationarity
        for _ in 0..200_000 {
            let rec = mpg_ideal_update(&mdp, &mut policy, 0.8, tau, 1.0).unwrap();
            if rec.norms.iter().all(|&n| n < 1e-12) {
                break;
            }
        }
        let rec = mpg_ideal_update(&mdp, &mut policy, 0.8, tau, 1.0).unwrap();
        assert!(rec.norms.iter().all(|&n| n < 1e-10), "not stationary");
        let sol = solve_optimal(&mdp, &baseline, 2, tau, 1.0).unwrap();
        for i in 1..=2 {
            assert!(policy.step(i).as_table().max_abs_diff(sol.pi(i)) < 1e-6);
        }
    }

    #[test]
    fn log_increment_matches_first_order_expansion() {
        // pin blocks below m at their optima; the log-probability change
        // of block m after one exact-gradient step should match the
        // first-order expression with an O(eta^2) remainder
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let baseline = uniform_baseline(&mdp);
        let tau = 0.5;
        let m = 3;
        let sol = solve_optimal(&mdp, &baseline, m, tau, 1.0).unwrap();
        let mut policy0 = instances::random_tabular_policy(&mdp, m, tau, &mut rng);
        let mut tables: Vec<_> = sol.pi_star[..m - 1].to_vec();
        tables.push(policy0.step(m).as_table());
        pin_to_tables(&mut policy0, &tables);

        // first-order prediction: <grad_theta log pi, grad_theta J>
        let mut probe = policy0.clone();
        let rec = mpg_ideal_update(&mdp, &mut probe, 1.0, tau, 1.0).unwrap();
        let grad_j = &rec.deltas[m - 1];

        let (a, s) = (0usize, 1usize);
        let g_log = policy0.step(m).grad_log_policy(a, s);
        let predicted_rate: f64 = g_log.iter().zip(grad_j).map(|(x, y)| x * y).sum();

        let mut errs = Vec::new();
        for &eta in &[1e-3, 5e-4, 2.5e-4] {
            let mut p = policy0.clone();
            mpg_ideal_update(&mdp, &mut p, eta, tau, 1.0).unwrap();
            let before = policy0.step(m).action_distribution(s)[a].ln();
            let after = p.step(m).action_distribution(s)[a].ln();
            errs.push(((after - before) - eta * predicted_rate).abs() / eta);
        }
        // remainder/eta should shrink linearly in eta (i.e. remainder = O(eta^2))
        assert!(errs[1] < 0.75 * errs[0] + 1e-12, "errs {errs:?}");
        assert!(errs[2] < 0.75 * errs[1] + 1e-12, "errs {errs:?}");
    }

    #[test]
    fn divergence_guard_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mdp = instances::random_mdp(2, 2, &mut rng);
        let mut config = TrainConfig::new(2, 100_000);
        config.variant = UpdateVariant::Sampled;
        // absurd learning rate to force blow-up
        config.eta0 = 1e5;
        config.eta_terminal = 1e5;
        config.tau0 = 0.05;
        config.tau_terminal = 0.05;
        config.exact_log_every = 0;
        match train(&mdp, &config) {
            Err(MpgError::Divergence(v)) => assert!(v > 1e6),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_rendering_is_stable() {
        let log = TrainLog {
            rows: vec![LogRow {
                episode: 0,
                j_exact: Some(1.5),
                cum_reward: -0.25,
                eta: 0.1,
                tau: 0.5,
                update_norms: vec![0.0, 2.0],
            }],
            clip_total: 0,
            episodes_run: 1,
        };
        let csv = log.to_csv();
        assert_eq!(
            csv,
            "episode,j_exact,cum_reward,eta,tau,norm_1,norm_2\n\
             0,1.500000000000e0,-2.500000000000e-1,1.000000000000e-1,5.000000000000e-1,0.000000000000e0,2.000000000000e0\n"
        );
    }
}
