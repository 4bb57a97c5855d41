//! Linear-preference softmax policies over feature maps, the extended
//! (per-horizon) policy container, and exact policy gradients.
//!
//! An extended policy is an ordered tuple `(pi^{(1)}, ..., pi^{(n)})`
//! where `pi^{(i)}` is used when `i` steps remain. Each step policy owns
//! its parameter block; nothing is shared across steps in the linear
//! model.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{MpgError, Result};
use crate::mdp::FiniteMdp;

/// Counts how often a preference hit the overflow clamp. Purely
/// diagnostic; a nonzero count usually means the learning rate is too
/// large for the current temperature.
static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_clamp_events() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Dense per-state action distributions for a finite MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    /// `probs[s * n_actions + a]`.
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        if n_states == 0 {
            return Err(MpgError::InvalidArgument("empty policy table".into()));
        }
        let n_actions = rows[0].len();
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(MpgError::DimensionMismatch(format!(
                    "row {s} has {} entries, expected {n_actions}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(MpgError::InvalidArgument(format!(
                    "row {s} is not a distribution (sum {sum})"
                )));
            }
            probs.extend_from_slice(row);
        }
        Ok(PolicyTable {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, a: usize, s: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Per-state KL divergence `D_KL(self || other)(s)`.
    pub fn kl_per_state(&self, other: &PolicyTable) -> Result<Vec<f64>> {
        (0..self.n_states)
            .map(|s| kl_divergence(self.row(s), other.row(s)))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &PolicyTable) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `D_KL(p || q) = sum_a p(a) log(p(a)/q(a))` with `0 log 0 := 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MpgError::DimensionMismatch(
            "kl_divergence: length mismatch".into(),
        ));
    }
    let mut sum = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa == 0.0 {
            continue;
        }
        if qa == 0.0 {
            return Err(MpgError::KlUnsupported(a));
        }
        sum += pa * (pa / qa).ln();
    }
    Ok(sum.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Kronecker delta per `(a, s)` pair; the induced kernel is the
    /// identity on the `A x S` grid.
    Tabular,
    /// `scale * e_(a,s)`: same expressibility and update rule as
    /// `Tabular`, but the induced kernel is `scale^2 * I`, so every
    /// parameter update moves the preferences `scale^2` times further.
    ScaledTabular,
    Custom,
    RandomFeature,
}

/// Feature map `psi: A x S -> R^P` for linear preferences on a finite
/// grid. Flat grid index convention: `a * n_states + s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    dim: usize,
    n_actions: usize,
    n_states: usize,
    /// `rows[(a * n_states + s) * dim ..][..dim]`; empty for Tabular.
    rows: Vec<f64>,
    /// Feature norm for `ScaledTabular`; 1 otherwise.
    #[serde(default = "default_scale")]
    scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

impl FeatureMap {
    pub fn tabular(n_actions: usize, n_states: usize) -> Self {
        FeatureMap {
            kind: FeatureKind::Tabular,
            dim: n_actions * n_states,
            n_actions,
            n_states,
            rows: Vec::new(),
            scale: 1.0,
        }
    }

    /// Kronecker-delta features scaled by `scale`.
    pub fn scaled_tabular(n_actions: usize, n_states: usize, scale: f64) -> Result<Self> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(MpgError::InvalidArgument(
                "feature scale must be positive".into(),
            ));
        }
        Ok(FeatureMap {
            kind: FeatureKind::ScaledTabular,
            dim: n_actions * n_states,
            n_actions,
            n_states,
            rows: Vec::new(),
            scale,
        })
    }

    /// Custom basis: one feature row per `(a, s)` pair, flat grid order.
    pub fn custom(n_actions: usize, n_states: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        Self::dense(FeatureKind::Custom, n_actions, n_states, dim, rows)
    }

    pub fn dense(
        kind: FeatureKind,
        n_actions: usize,
        n_states: usize,
        dim: usize,
        rows: Vec<f64>,
    ) -> Result<Self> {
        if rows.len() != n_actions * n_states * dim {
            return Err(MpgError::DimensionMismatch(format!(
                "feature rows have {} entries, expected {}",
                rows.len(),
                n_actions * n_states * dim
            )));
        }
        Ok(FeatureMap {
            kind,
            dim,
            n_actions,
            n_states,
            rows,
            scale: 1.0,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn grid_index(&self, a: usize, s: usize) -> usize {
        a * self.n_states + s
    }

    pub fn eval(&self, a: usize, s: usize) -> Vec<f64> {
        match self.kind {
            FeatureKind::Tabular | FeatureKind::ScaledTabular => {
                let mut v = vec![0.0; self.dim];
                v[self.grid_index(a, s)] = self.scale;
                v
            }
            _ => {
                let base = self.grid_index(a, s) * self.dim;
                self.rows[base..base + self.dim].to_vec()
            }
        }
    }

    pub fn dot(&self, theta: &[f64], a: usize, s: usize) -> f64 {
        match self.kind {
            FeatureKind::Tabular => theta[self.grid_index(a, s)],
            FeatureKind::ScaledTabular => self.scale * theta[self.grid_index(a, s)],
            _ => {
                let base = self.grid_index(a, s) * self.dim;
                self.rows[base..base + self.dim]
                    .iter()
                    .zip(theta)
                    .map(|(x, t)| x * t)
                    .sum()
            }
        }
    }

    /// `out += coeff * psi(a, s)`; the tabular path is a single write.
    pub fn accumulate(&self, out: &mut [f64], coeff: f64, a: usize, s: usize) {
        match self.kind {
            FeatureKind::Tabular => out[self.grid_index(a, s)] += coeff,
            FeatureKind::ScaledTabular => out[self.grid_index(a, s)] += coeff * self.scale,
            _ => {
                let base = self.grid_index(a, s) * self.dim;
                for (o, x) in out.iter_mut().zip(&self.rows[base..base + self.dim]) {
                    *o += coeff * x;
                }
            }
        }
    }

    /// Gram matrix `Theta[(a,s),(a',s')] = psi(a,s) . psi(a',s')` over
    /// the full grid, flat order.
    pub fn gram(&self) -> Vec<f64> {
        let g = self.n_actions * self.n_states;
        let mut out = vec![0.0; g * g];
        match self.kind {
            FeatureKind::Tabular | FeatureKind::ScaledTabular => {
                let k = self.scale * self.scale;
                for i in 0..g {
                    out[i * g + i] = k;
                }
            }
            _ => {
                for i in 0..g {
                    for j in i..g {
                        let (bi, bj) = (i * self.dim, j * self.dim);
                        let v: f64 = self.rows[bi..bi + self.dim]
                            .iter()
                            .zip(&self.rows[bj..bj + self.dim])
                            .map(|(x, y)| x * y)
                            .sum();
                        out[i * g + j] = v;
                        out[j * g + i] = v;
                    }
                }
            }
        }
        out
    }
}

/// Boltzmann policy with linear preferences `h(a,s) = theta . psi(a,s)`:
/// `pi(a|s) ~ baseline(a|s) exp(h(a,s)/tau)`.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    pub theta: Vec<f64>,
    features: FeatureMap,
    tau: f64,
    baseline: PolicyTable,
}

impl SoftmaxPolicy {
    pub fn new(features: FeatureMap, tau: f64, baseline: PolicyTable) -> Result<Self> {
        if tau <= 0.0 {
            return Err(MpgError::InvalidArgument("tau must be positive".into()));
        }
        if baseline.n_states() != features.n_states()
            || baseline.n_actions() != features.n_actions()
        {
            return Err(MpgError::DimensionMismatch(
                "baseline shape does not match feature map".into(),
            ));
        }
        for s in 0..baseline.n_states() {
            for a in 0..baseline.n_actions() {
                if baseline.prob(a, s) <= 0.0 {
                    return Err(MpgError::InvalidArgument(format!(
                        "baseline must have full support; zero at (a={a}, s={s})"
                    )));
                }
            }
        }
        let dim = features.dim();
        Ok(SoftmaxPolicy {
            theta: vec![0.0; dim],
            features,
            tau,
            baseline,
        })
    }

    pub fn tabular_uniform(n_actions: usize, n_states: usize, tau: f64) -> Self {
        SoftmaxPolicy::new(
            FeatureMap::tabular(n_actions, n_states),
            tau,
            PolicyTable::uniform(n_states, n_actions),
        )
        .expect("tabular uniform policy is well formed")
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        assert!(tau > 0.0, "tau must be positive");
        self.tau = tau;
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn baseline(&self) -> &PolicyTable {
        &self.baseline
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn preference(&self, a: usize, s: usize) -> f64 {
        let h = self.features.dot(&self.theta, a, s);
        let cap = 500.0 / self.tau;
        if h.abs() > cap {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
            h.clamp(-cap, cap)
        } else {
            h
        }
    }

    pub fn try_action_distribution(&self, s: usize) -> Result<Vec<f64>> {
        let na = self.n_actions();
        let mut logits = Vec::with_capacity(na);
        for a in 0..na {
            let h = self.preference(a, s);
            if !h.is_finite() {
                return Err(MpgError::NonFinitePreference { action: a, state: s });
            }
            logits.push(self.baseline.prob(a, s).ln() + h / self.tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(probs)
    }

    pub fn action_distribution(&self, s: usize) -> Vec<f64> {
        self.try_action_distribution(s)
            .expect("finite preferences")
    }

    /// `grad_theta log pi(a|s) = (1/tau) sum_{a'} (delta_{a,a'} - pi(a'|s)) psi(a',s)`.
    pub fn grad_log_policy(&self, a: usize, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.features.dim()];
        self.accumulate_log_grad(&mut out, 1.0, a, s, &self.action_distribution(s));
        out
    }

    /// `out += coeff * grad_theta log pi(a|s)` given precomputed probs.
    pub fn accumulate_log_grad(
        &self,
        out: &mut [f64],
        coeff: f64,
        a: usize,
        s: usize,
        probs: &[f64],
    ) {
        let scale = coeff / self.tau;
        for a2 in 0..self.n_actions() {
            let w = scale * (if a2 == a { 1.0 } else { 0.0 } - probs[a2]);
            self.features.accumulate(out, w, a2, s);
        }
    }

    /// In-place update `theta += coeff * grad log pi(a|s)`.
    pub fn apply_log_grad(&mut self, coeff: f64, a: usize, s: usize) {
        let probs = self.action_distribution(s);
        let scale = coeff / self.tau;
        let na = self.n_actions();
        for a2 in 0..na {
            let w = scale * (if a2 == a { 1.0 } else { 0.0 } - probs[a2]);
            self.features.accumulate(&mut self.theta, w, a2, s);
        }
    }

    /// Materializes `pi(a|s)` over all states of a finite MDP.
    pub fn as_table(&self) -> PolicyTable {
        let rows: Vec<Vec<f64>> = (0..self.n_states())
            .map(|s| self.action_distribution(s))
            .collect();
        PolicyTable::from_rows(rows).expect("softmax rows are distributions")
    }
}

/// Ordered sequence of step policies; index `i` (1-based) is the i-step
/// policy `pi^{(i)}`. Parameter blocks are disjoint by construction.
#[derive(Debug, Clone)]
pub struct ExtendedPolicy {
    steps: Vec<SoftmaxPolicy>,
}

impl ExtendedPolicy {
    pub fn from_steps(steps: Vec<SoftmaxPolicy>) -> Result<Self> {
        if steps.is_empty() {
            return Err(MpgError::InvalidArgument(
                "extended policy needs horizon >= 1".into(),
            ));
        }
        Ok(ExtendedPolicy { steps })
    }

    /// Zero-initialized tabular extended policy with uniform baseline.
    pub fn tabular(n_actions: usize, n_states: usize, horizon: usize, tau: f64) -> Self {
        let steps = (0..horizon)
            .map(|_| SoftmaxPolicy::tabular_uniform(n_actions, n_states, tau))
            .collect();
        ExtendedPolicy { steps }
    }

    pub fn for_mdp(mdp: &FiniteMdp, horizon: usize, tau: f64) -> Self {
        Self::tabular(mdp.n_actions(), mdp.n_states(), horizon, tau)
    }

    /// Tabular extended policy whose features are scaled by `scale`, so
    /// the induced kernel is `scale^2 * I` instead of `I`.
    pub fn for_mdp_scaled(
        mdp: &FiniteMdp,
        horizon: usize,
        tau: f64,
        scale: f64,
    ) -> Result<Self> {
        let (na, ns) = (mdp.n_actions(), mdp.n_states());
        let steps = (0..horizon)
            .map(|_| {
                SoftmaxPolicy::new(
                    FeatureMap::scaled_tabular(na, ns, scale)?,
                    tau,
                    PolicyTable::uniform(ns, na),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ExtendedPolicy::from_steps(steps)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// The i-step policy, `1 <= i <= n`.
    pub fn step(&self, i: usize) -> &SoftmaxPolicy {
        &self.steps[i - 1]
    }

    pub fn step_mut(&mut self, i: usize) -> &mut SoftmaxPolicy {
        &mut self.steps[i - 1]
    }

    pub fn steps(&self) -> &[SoftmaxPolicy] {
        &self.steps
    }

    pub fn set_tau(&mut self, tau: f64) {
        for step in &mut self.steps {
            step.set_tau(tau);
        }
    }

    pub fn tau(&self) -> f64 {
        self.steps[0].tau()
    }

    pub fn tables(&self) -> Vec<PolicyTable> {
        self.steps.iter().map(|p| p.as_table()).collect()
    }

    pub fn max_theta_abs(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|p| p.theta.iter())
            .fold(0.0f64, |m, &t| m.max(t.abs()))
    }

    pub fn to_checkpoint(&self) -> serde_json::Value {
        let doc = Checkpoint {
            horizon: self.horizon(),
            tau: self.tau(),
            feature_kind: self.steps[0].features().kind(),
            feature_scale: self.steps[0].features().scale(),
            thetas: self.steps.iter().map(|p| p.theta.clone()).collect(),
            baseline: self.steps[0].baseline().clone(),
        };
        serde_json::to_value(doc).expect("serializable")
    }

    /// Restores a checkpoint. Dense (non-tabular) feature rows are not
    /// stored in checkpoints; the caller supplies the feature map used
    /// during training.
    pub fn from_checkpoint(value: &serde_json::Value, features: FeatureMap) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_value(value.clone())?;
        if doc.thetas.len() != doc.horizon {
            return Err(MpgError::InvalidArgument(
                "checkpoint horizon does not match theta blocks".into(),
            ));
        }
        if doc.feature_kind != features.kind() {
            return Err(MpgError::InvalidArgument(
                "checkpoint feature kind does not match supplied features".into(),
            ));
        }
        if (doc.feature_scale - features.scale()).abs() > 1e-12 {
            return Err(MpgError::InvalidArgument(
                "checkpoint feature scale does not match supplied features".into(),
            ));
        }
        let mut steps = Vec::with_capacity(doc.horizon);
        for theta in doc.thetas {
            let mut p = SoftmaxPolicy::new(features.clone(), doc.tau, doc.baseline.clone())?;
            if theta.len() != p.theta.len() {
                return Err(MpgError::DimensionMismatch(
                    "checkpoint theta length does not match feature dimension".into(),
                ));
            }
            p.theta = theta;
            steps.push(p);
        }
        ExtendedPolicy::from_steps(steps)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    horizon: usize,
    tau: f64,
    feature_kind: FeatureKind,
    #[serde(default = "default_scale")]
    feature_scale: f64,
    thetas: Vec<Vec<f64>>,
    baseline: PolicyTable,
}
