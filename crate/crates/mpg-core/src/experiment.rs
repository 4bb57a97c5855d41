//! Configuration-driven experiment runner: hyperparameter sweeps over
//! (tau_0, eta_0, horizon) cells, multi-agent training with per-run RNG
//! streams, evaluation games, deterministic CSV/markdown reporting, and
//! the self-check suite behind `verify`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certify, LAMBDA_CUT_REL};
use crate::env::{frozen_lake_4x4, frozen_lake_8x8, frozenlake_as_mdp, CartPole, Cell as GridCell,
    Environment, FrozenLakeSpec};
use crate::error::{MpgError, Result};
use crate::instances::{random_mdp, random_policy_table};
use crate::mdp::{sample_categorical, sample_trajectory, FiniteMdp};
use crate::neural::{neural_sampled_update, ntk_gram, HorizonEncoding, Mlp, NeuralPolicy};
use crate::policy::{ExtendedPolicy, FeatureMap, PolicyTable};
use crate::softdp::{lse_identity_max_err, objective, solve_optimal, truncate_solution, value_gap};
use crate::train::{decay_schedule, mpg_ideal_update, mpg_sampled_update, train, BaselineState,
    BaselineValue,
    TrainConfig, UpdateVariant};

// ---------------------------------------------------------------------------
// Experiment configuration

/// Benchmark selector used in configs, checkpoints and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "frozenlake-4x4")]
    FrozenLake4x4,
    #[serde(rename = "frozenlake-8x8")]
    FrozenLake8x8,
    #[serde(rename = "cartpole")]
    CartPole,
}

impl EnvKind {
    pub fn parse(id: &str) -> Result<EnvKind> {
        match id {
            "frozenlake-4x4" => Ok(EnvKind::FrozenLake4x4),
            "frozenlake-8x8" => Ok(EnvKind::FrozenLake8x8),
            "cartpole" => Ok(EnvKind::CartPole),
            other => Err(MpgError::Config(format!(
                "unknown environment '{other}' (expected frozenlake-4x4, frozenlake-8x8 or cartpole)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::FrozenLake4x4 => "frozenlake-4x4",
            EnvKind::FrozenLake8x8 => "frozenlake-8x8",
            EnvKind::CartPole => "cartpole",
        }
    }

    pub fn frozenlake_spec(&self) -> Option<FrozenLakeSpec> {
        match self {
            EnvKind::FrozenLake4x4 => Some(frozen_lake_4x4()),
            EnvKind::FrozenLake8x8 => Some(frozen_lake_8x8()),
            EnvKind::CartPole => None,
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Neural preference model settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralSettings {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub encoding: HorizonEncoding,
    /// Start from exactly-zero preferences (uniform policy) by zeroing
    /// the output layer; hidden layers keep their random init.
    #[serde(default = "default_true")]
    pub zero_output: bool,
    /// Grid worlds only: encode the state as a one-hot vector instead
    /// of the compact `(row, col) / size` pair.
    #[serde(default = "default_true")]
    pub one_hot_states: bool,
    /// Fixed multiplier on the network output; scales the tangent
    /// kernel (and with it the effective step size) by its square.
    #[serde(default = "default_out_scale")]
    pub out_scale: f64,
    /// Feed the outer product of the action one-hot and the state
    /// features instead of their concatenation. With one-hot states and
    /// no hidden layers the network is the tabular linear model shared
    /// across blocks.
    #[serde(default)]
    pub product_input: bool,
}

fn default_true() -> bool {
    true
}

fn default_out_scale() -> f64 {
    1.0
}

impl Default for NeuralSettings {
    fn default() -> Self {
        NeuralSettings {
            hidden: vec![32],
            encoding: HorizonEncoding::SharedShrinking,
            zero_output: true,
            one_hot_states: true,
            out_scale: 1.0,
            product_input: false,
        }
    }
}

fn default_variant() -> UpdateVariant {
    UpdateVariant::Sampled
}

/// One experiment: a grid of (tau_0, eta_0, horizon) cells, each
/// trained with `agents` independent seeds and evaluated over
/// `eval_games` games at the terminal temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub environment: EnvKind,
    /// Grid axes; every combination is one cell.
    pub tau0: Vec<f64>,
    pub eta0: Vec<f64>,
    pub horizon: Vec<usize>,
    pub tau_terminal: f64,
    pub eta_terminal: f64,
    pub episodes: usize,
    /// Independent training runs per cell.
    pub agents: usize,
    pub eval_games: usize,
    pub seed_root: u64,
    /// Directory receiving CSV, markdown and checkpoint files.
    pub output: String,
    /// Discount factor of the trained objective; 1 means undiscounted.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Baseline `v_t` subtracted from the returns in the sampled update.
    #[serde(default = "default_baseline")]
    pub baseline: BaselineValue,
    /// Norm of the tabular feature vectors. Scaling the features by `c`
    /// multiplies the tangent kernel (and thus the effective step size
    /// per parameter update) by `c^2` without changing the update rule
    /// or which policies are expressible.
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
    #[serde(default = "default_variant")]
    pub variant: UpdateVariant,
    /// Preference model; defaults to tabular parameters on the grid
    /// worlds and the neural model on CartPole.
    #[serde(default)]
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub neural: NeuralSettings,
}

/// Which preference parametrization a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Per-block tabular parameters (the disjoint linear model).
    Tabular,
    /// Feed-forward preference network (possibly shared across blocks
    /// through the horizon encoding).
    Neural,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_baseline() -> BaselineValue {
    BaselineValue::RunningMean { decay: 0.99 }
}

fn default_feature_scale() -> f64 {
    1.0
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| MpgError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentSpec> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau0.is_empty() || self.eta0.is_empty() || self.horizon.is_empty() {
            return Err(MpgError::Config("grid axes must be non-empty".into()));
        }
        if self.agents == 0 {
            return Err(MpgError::Config("agents must be >= 1".into()));
        }
        if self.eval_games == 0 {
            return Err(MpgError::Config("eval_games must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(MpgError::Config("episodes must be >= 1".into()));
        }
        for (name, v) in [
            ("tau_terminal", self.tau_terminal),
            ("eta_terminal", self.eta_terminal),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(MpgError::Config(format!("{name} must be positive")));
            }
        }
        for &t in &self.tau0 {
            if t <= 0.0 || !t.is_finite() {
                return Err(MpgError::Config("tau0 entries must be positive".into()));
            }
        }
        for &e in &self.eta0 {
            if e <= 0.0 || !e.is_finite() {
                return Err(MpgError::Config("eta0 entries must be positive".into()));
            }
        }
        if self.horizon.contains(&0) {
            return Err(MpgError::Config("horizon entries must be >= 1".into()));
        }
        if self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(MpgError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.feature_scale <= 0.0 || !self.feature_scale.is_finite() {
            return Err(MpgError::Config("feature_scale must be positive".into()));
        }
        if self.neural.out_scale <= 0.0 || !self.neural.out_scale.is_finite() {
            return Err(MpgError::Config("out_scale must be positive".into()));
        }
        if self.environment == EnvKind::CartPole && self.model == Some(ModelKind::Tabular) {
            return Err(MpgError::Config(
                "cartpole has a continuous state; only the neural model applies".into(),
            ));
        }
        Ok(())
    }

    /// Resolved preference model (tabular on grids, neural on CartPole,
    /// unless overridden).
    pub fn model(&self) -> ModelKind {
        self.model.unwrap_or(if self.environment == EnvKind::CartPole {
            ModelKind::Neural
        } else {
            ModelKind::Tabular
        })
    }

    /// All grid cells, horizon-major then tau_0 then eta_0 (the order
    /// the report tables use).
    pub fn cells(&self) -> Vec<ParamCell> {
        let mut out = Vec::new();
        for &horizon in &self.horizon {
            for &tau0 in &self.tau0 {
                for &eta0 in &self.eta0 {
                    out.push(ParamCell {
                        tau0,
                        eta0,
                        horizon,
                    });
                }
            }
        }
        out
    }

    fn train_config(&self, cell: &ParamCell, seed: u64) -> TrainConfig {
        TrainConfig {
            horizon: cell.horizon,
            episodes: self.episodes,
            eta0: cell.eta0,
            eta_terminal: self.eta_terminal,
            tau0: cell.tau0,
            tau_terminal: self.tau_terminal,
            gamma: self.gamma,
            feature_scale: self.feature_scale,
            variant: self.variant,
            baseline_value: self.baseline,
            clip_ceiling: 10.0,
            seed,
            batch: 1,
            exact_log_every: 0,
        }
    }
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCell {
    pub tau0: f64,
    pub eta0: f64,
    pub horizon: usize,
}

// ---------------------------------------------------------------------------
// Seeds

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training seed of agent `agent` in grid cell `cell`: a well-mixed
/// function of the experiment's seed root so parallel runs never share
/// a stream.
pub fn run_seed(root: u64, cell: usize, agent: usize) -> u64 {
    let a = mix(root ^ 0x51a9_5f1c_0e3d_7b42);
    let b = mix(a ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    mix(b ^ (agent as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

fn eval_seed(train_seed: u64) -> u64 {
    mix(train_seed ^ 0x7e46_9e5a_43b1_9c11)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Tally of one agent's evaluation games.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EvalOutcome {
    pub games: usize,
    /// Games reaching the goal (grid worlds) / surviving the full
    /// horizon (CartPole).
    pub wins: usize,
    /// Total episode length over all games.
    pub steps_all: usize,
    /// Total episode length over winning games only.
    pub steps_win: usize,
}

impl EvalOutcome {
    pub fn success_pct(&self) -> f64 {
        100.0 * self.wins as f64 / self.games as f64
    }
}

/// Plays `games` episodes with the stochastic softmax policy: at `k`
/// steps into the game the `(n-k)`-step member acts.
pub fn evaluate_frozenlake(
    fl: &FrozenLakeSpec,
    policy: &ExtendedPolicy,
    games: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EvalOutcome> {
    let n = policy.horizon();
    let mut out = EvalOutcome {
        games,
        ..Default::default()
    };
    for _ in 0..games {
        let mut s = fl.start;
        let mut steps = 0;
        for k in 0..n {
            let probs = policy.step(n - k).try_action_distribution(s)?;
            let a = sample_categorical(&probs, rng);
            let (s2, _, done) = fl.move_from(s, a);
            s = s2;
            steps += 1;
            if done {
                break;
            }
        }
        out.steps_all += steps;
        if fl.grid[s] == GridCell::Goal {
            out.wins += 1;
            out.steps_win += steps;
        }
    }
    Ok(out)
}

/// As [`evaluate_frozenlake`] for a neural preference policy acting on
/// encoded states.
pub fn evaluate_frozenlake_neural(
    fl: &FrozenLakeSpec,
    policy: &NeuralPolicy,
    games: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EvalOutcome> {
    let n = policy.horizon;
    let mut out = EvalOutcome {
        games,
        ..Default::default()
    };
    for _ in 0..games {
        let mut s = fl.start;
        let mut steps = 0;
        for k in 0..n {
            let probs = policy.action_distribution(&fl.encode_cell(s), n - k)?;
            let a = sample_categorical(&probs, rng);
            let (s2, _, done) = fl.move_from(s, a);
            s = s2;
            steps += 1;
            if done {
                break;
            }
        }
        out.steps_all += steps;
        if fl.grid[s] == GridCell::Goal {
            out.wins += 1;
            out.steps_win += steps;
        }
    }
    Ok(out)
}

/// Plays `games` CartPole episodes; a win survives all `n` steps.
pub fn evaluate_cartpole(
    env: &CartPole,
    policy: &NeuralPolicy,
    games: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EvalOutcome> {
    let n = policy.horizon;
    let mut out = EvalOutcome {
        games,
        ..Default::default()
    };
    for _ in 0..games {
        let mut s = env.reset(rng);
        let mut steps = 0;
        let mut fell = false;
        for k in 0..n {
            let enc = env.encode(&s);
            let probs = policy.action_distribution(&enc, n - k)?;
            let a = sample_categorical(&probs, rng);
            let (s2, _, done) = env.step(&s, a, rng)?;
            s = s2;
            steps += 1;
            if done {
                fell = true;
                break;
            }
        }
        out.steps_all += steps;
        if !fell {
            out.wins += 1;
            out.steps_win += steps;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Neural training loop

/// Episode loop for environments without an exact MDP export: sampled
/// nested updates on encoded trajectories, the same decay schedules and
/// divergence guard as the tabular loop. Returns the per-episode raw
/// cumulative rewards.
pub fn train_neural_policy<E: Environment>(
    env: &E,
    config: &TrainConfig,
    settings: &NeuralSettings,
) -> Result<(NeuralPolicy, Vec<f64>)> {
    config.validate()?;
    let n = config.horizon;
    let mut policy = NeuralPolicy::with_input(
        env.action_count(),
        env.state_dim(),
        n,
        &settings.hidden,
        settings.encoding,
        settings.product_input,
        config.tau0,
        config.seed,
    )?;
    if settings.zero_output {
        policy.zero_output_layer();
    }
    policy.out_scale = settings.out_scale;
    let mut rng = ChaCha12Rng::seed_from_u64(mix(config.seed ^ 0x1357_9bdf_2468_ace0));
    let d_eta = decay_schedule(config.eta0, config.eta_terminal, config.episodes)?;
    let d_tau = decay_schedule(config.tau0, config.tau_terminal, config.episodes)?;

    let mut eta = config.eta0;
    let mut tau = config.tau0;
    let mut v_t = BaselineState::new(config.baseline_value, n);
    let mut episode_rewards = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        policy.set_tau(tau);
        let mut state = env.reset(&mut rng);
        let mut states = Vec::with_capacity(n + 1);
        let mut actions = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        states.push(env.encode(&state));
        for k in 0..n {
            let probs = policy.action_distribution(&states[k], n - k)?;
            let a = sample_categorical(&probs, &mut rng);
            let (s2, r, _) = env.step(&state, a, &mut rng)?;
            actions.push(a);
            rewards.push(r);
            state = s2;
            states.push(env.encode(&state));
        }
        episode_rewards.push(rewards.iter().sum());
        let (_, returns) = neural_sampled_update(
            &mut policy,
            &states,
            &actions,
            &rewards,
            eta,
            tau,
            config.gamma,
            &v_t,
        )?;
        v_t.observe(&returns);
        let max_abs = policy.max_abs_param();
        if !max_abs.is_finite() || max_abs > 1e6 {
            return Err(MpgError::Divergence(max_abs));
        }
        eta *= d_eta;
        tau *= d_tau;
    }
    Ok((policy, episode_rewards))
}

// ---------------------------------------------------------------------------
// Runs and aggregation

/// Raw record of one training run (the per-agent ground truth the
/// aggregate columns are recomputed from).
#[derive(Debug, Clone, Serialize)]
pub struct AgentRecord {
    pub agent: usize,
    pub seed: u64,
    /// Parameter magnitudes blew past the guard during training.
    pub diverged: bool,
    /// Failed-to-train rule: diverged, or evaluation success < 5%.
    pub failed: bool,
    pub games: usize,
    pub wins: usize,
    pub steps_all: usize,
    pub steps_win: usize,
    #[serde(skip)]
    pub checkpoint: Option<serde_json::Value>,
}

/// One aggregate line of the results table.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub cell: ParamCell,
    /// Over non-failed agents; `None` when every agent failed.
    pub success_pct: Option<f64>,
    pub avg_steps: Option<f64>,
    pub failed_to_train: usize,
    pub agents: Vec<AgentRecord>,
}

/// Combines per-agent records into a table row. Failed runs are
/// excluded from the averages. `avg_steps` means steps-to-goal of
/// winning games on the grid worlds and episode length over all games
/// on CartPole (a win there always lasts the full horizon).
pub fn aggregate(env: EnvKind, cell: ParamCell, agents: Vec<AgentRecord>) -> ResultRow {
    let ok: Vec<&AgentRecord> = agents.iter().filter(|a| !a.failed).collect();
    let failed_to_train = agents.len() - ok.len();
    let (mut games, mut wins, mut steps_all, mut steps_win) = (0usize, 0usize, 0usize, 0usize);
    for a in &ok {
        games += a.games;
        wins += a.wins;
        steps_all += a.steps_all;
        steps_win += a.steps_win;
    }
    let success_pct = (games > 0).then(|| 100.0 * wins as f64 / games as f64);
    let avg_steps = if env == EnvKind::CartPole {
        (games > 0).then(|| steps_all as f64 / games as f64)
    } else {
        (wins > 0).then(|| steps_win as f64 / wins as f64)
    };
    ResultRow {
        cell,
        success_pct,
        avg_steps,
        failed_to_train,
        agents,
    }
}

fn eval_to_record(
    agent: usize,
    seed: u64,
    out: EvalOutcome,
    checkpoint: serde_json::Value,
) -> AgentRecord {
    let failed = (out.wins as f64) < 0.05 * out.games as f64;
    AgentRecord {
        agent,
        seed,
        diverged: false,
        failed,
        games: out.games,
        wins: out.wins,
        steps_all: out.steps_all,
        steps_win: out.steps_win,
        checkpoint: Some(checkpoint),
    }
}

fn diverged_record(agent: usize, seed: u64) -> AgentRecord {
    AgentRecord {
        agent,
        seed,
        diverged: true,
        failed: true,
        games: 0,
        wins: 0,
        steps_all: 0,
        steps_win: 0,
        checkpoint: None,
    }
}

fn run_agent(
    spec: &ExperimentSpec,
    cell_index: usize,
    cell: &ParamCell,
    agent: usize,
) -> Result<AgentRecord> {
    let seed = run_seed(spec.seed_root, cell_index, agent);
    let config = spec.train_config(cell, seed);
    let mut eval_rng = ChaCha12Rng::seed_from_u64(eval_seed(seed));
    match spec.environment {
        EnvKind::FrozenLake4x4 | EnvKind::FrozenLake8x8 => {
            let mut fl = spec.environment.frozenlake_spec().expect("grid world");
            match spec.model() {
                ModelKind::Tabular => {
                    let mdp = frozenlake_as_mdp(&fl, false)?;
                    match train(&mdp, &config) {
                        Err(MpgError::Divergence(_)) => Ok(diverged_record(agent, seed)),
                        Err(e) => Err(e),
                        Ok((mut policy, _log)) => {
                            policy.set_tau(spec.tau_terminal);
                            let out =
                                evaluate_frozenlake(&fl, &policy, spec.eval_games, &mut eval_rng)?;
                            Ok(eval_to_record(agent, seed, out, policy.to_checkpoint()))
                        }
                    }
                }
                ModelKind::Neural => {
                    if spec.neural.one_hot_states {
                        fl = fl.with_one_hot();
                    }
                    match train_neural_policy(&fl, &config, &spec.neural) {
                        Err(MpgError::Divergence(_)) => Ok(diverged_record(agent, seed)),
                        Err(e) => Err(e),
                        Ok((mut policy, _rewards)) => {
                            policy.set_tau(spec.tau_terminal);
                            let out = evaluate_frozenlake_neural(
                                &fl,
                                &policy,
                                spec.eval_games,
                                &mut eval_rng,
                            )?;
                            Ok(eval_to_record(agent, seed, out, policy.to_checkpoint()))
                        }
                    }
                }
            }
        }
        EnvKind::CartPole => {
            let env = CartPole::default();
            match train_neural_policy(&env, &config, &spec.neural) {
                Err(MpgError::Divergence(_)) => Ok(diverged_record(agent, seed)),
                Err(e) => Err(e),
                Ok((mut policy, _rewards)) => {
                    policy.set_tau(spec.tau_terminal);
                    let out = evaluate_cartpole(&env, &policy, spec.eval_games, &mut eval_rng)?;
                    Ok(eval_to_record(agent, seed, out, policy.to_checkpoint()))
                }
            }
        }
    }
}

/// Trains and evaluates every (cell, agent) pair in parallel and
/// aggregates one [`ResultRow`] per cell, in the order of
/// [`ExperimentSpec::cells`].
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let cells = spec.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.agents).map(move |a| (c, a)))
        .collect();
    let records: Vec<AgentRecord> = jobs
        .par_iter()
        .map(|&(c, a)| run_agent(spec, c, &cells[c], a))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let agents: Vec<AgentRecord> = records
            [c * spec.agents..(c + 1) * spec.agents]
            .to_vec();
        rows.push(aggregate(spec.environment, *cell, agents));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Reporting

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.2}"),
        None => String::new(),
    }
}

/// Aggregate table, one line per grid cell. Deterministic bytes for a
/// given set of rows.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("tau0,eta0,horizon,agents,success_pct,avg_steps,failed_to_train\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.cell.tau0,
            row.cell.eta0,
            row.cell.horizon,
            row.agents.len(),
            fmt_opt(row.success_pct),
            fmt_opt(row.avg_steps),
            row.failed_to_train,
        ));
    }
    s
}

/// Raw per-agent records (the aggregate table is recomputable from
/// these).
pub fn agents_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(
        "tau0,eta0,horizon,agent,seed,diverged,failed,games,wins,steps_all,steps_win\n",
    );
    for row in rows {
        for a in &row.agents {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                row.cell.tau0,
                row.cell.eta0,
                row.cell.horizon,
                a.agent,
                a.seed,
                a.diverged,
                a.failed,
                a.games,
                a.wins,
                a.steps_all,
                a.steps_win,
            ));
        }
    }
    s
}

/// Markdown results table grouped by horizon, one table per group.
pub fn markdown_report(name: &str, env: EnvKind, rows: &[ResultRow]) -> String {
    let mut s = format!("# {name}\n\nEnvironment: `{env}`.\n");
    let mut horizons: Vec<usize> = rows.iter().map(|r| r.cell.horizon).collect();
    horizons.dedup();
    for h in horizons {
        s.push_str(&format!(
            "\n## Horizon {h}\n\n| tau_0 | eta_0 | success % | avg steps | failed to train |\n|---|---|---|---|---|\n"
        ));
        for row in rows.iter().filter(|r| r.cell.horizon == h) {
            let pct = row.success_pct.map_or("--".into(), |v| format!("{v:.2}"));
            let steps = row.avg_steps.map_or("--".into(), |v| format!("{v:.2}"));
            s.push_str(&format!(
                "| {} | {:e} | {} | {} | {} |\n",
                row.cell.tau0, row.cell.eta0, pct, steps, row.failed_to_train,
            ));
        }
    }
    s
}

/// Reads the aggregate table back (without per-agent records), so
/// reports can be regenerated from a results directory.
pub fn rows_from_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let bad = |line: &str| MpgError::Config(format!("malformed results row: '{line}'"));
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(line));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(line));
        let opt = |t: &str| -> Result<Option<f64>> {
            if t.is_empty() {
                Ok(None)
            } else {
                Ok(Some(num(t)?))
            }
        };
        rows.push(ResultRow {
            cell: ParamCell {
                tau0: num(f[0])?,
                eta0: num(f[1])?,
                horizon: f[2].parse().map_err(|_| bad(line))?,
            },
            success_pct: opt(f[4])?,
            avg_steps: opt(f[5])?,
            failed_to_train: f[6].parse().map_err(|_| bad(line))?,
            agents: Vec::new(),
        });
    }
    Ok(rows)
}

/// Writes `results.csv`, `agents.csv`, `report.md`, `spec.json` and one
/// checkpoint per cell (first non-failed agent) into `spec.output`.
pub fn write_outputs(spec: &ExperimentSpec, rows: &[ResultRow]) -> Result<()> {
    let dir = Path::new(&spec.output);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), results_csv(rows))?;
    std::fs::write(dir.join("agents.csv"), agents_csv(rows))?;
    std::fs::write(
        dir.join("report.md"),
        markdown_report(&spec.name, spec.environment, rows),
    )?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    for (c, row) in rows.iter().enumerate() {
        if let Some(agent) = row.agents.iter().find(|a| !a.failed) {
            let doc = checkpoint_document(
                spec.environment,
                spec.model(),
                agent.checkpoint.as_ref().expect("non-failed run"),
            );
            std::fs::write(
                dir.join(format!("checkpoint_cell{c}.json")),
                serde_json::to_string(&doc)?,
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Trained policy loaded back from disk.
pub enum LoadedPolicy {
    Tabular(ExtendedPolicy),
    Neural(NeuralPolicy),
}

pub fn checkpoint_document(
    env: EnvKind,
    model: ModelKind,
    policy: &serde_json::Value,
) -> serde_json::Value {
    serde_json::json!({
        "env": env,
        "kind": match model {
            ModelKind::Neural => "neural",
            ModelKind::Tabular => "tabular",
        },
        "policy": policy,
    })
}

pub fn save_checkpoint(
    path: &Path,
    env: EnvKind,
    model: ModelKind,
    policy: &serde_json::Value,
) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string(&checkpoint_document(env, model, policy))?,
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EnvKind, LoadedPolicy)> {
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let env: EnvKind = serde_json::from_value(
        doc.get("env")
            .ok_or_else(|| MpgError::Config("checkpoint missing 'env'".into()))?
            .clone(),
    )?;
    let kind = doc
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| MpgError::Config("checkpoint missing 'kind'".into()))?;
    let policy = doc
        .get("policy")
        .ok_or_else(|| MpgError::Config("checkpoint missing 'policy'".into()))?;
    let loaded = match kind {
        "neural" => LoadedPolicy::Neural(NeuralPolicy::from_checkpoint(policy)?),
        "tabular" => {
            let fl = env.frozenlake_spec().ok_or_else(|| {
                MpgError::Config("tabular checkpoint on a non-grid environment".into())
            })?;
            let scale = policy
                .get("feature_scale")
                .and_then(|v| v.as_f64())
                .unwrap_or(1.0);
            let features = match policy.get("feature_kind").and_then(|v| v.as_str()) {
                Some("scaled_tabular") => FeatureMap::scaled_tabular(4, fl.n_states(), scale)?,
                _ => FeatureMap::tabular(4, fl.n_states()),
            };
            LoadedPolicy::Tabular(ExtendedPolicy::from_checkpoint(policy, features)?)
        }
        other => {
            return Err(MpgError::Config(format!(
                "unknown checkpoint kind '{other}'"
            )))
        }
    };
    Ok((env, loaded))
}

// ---------------------------------------------------------------------------
// Verification suite

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    /// Reduced sample counts; minutes on a laptop.
    Fast,
    /// Full sample counts, per-check runtimes in the rendered report.
    Full,
}

impl VerifyLevel {
    pub fn parse(s: &str) -> Result<VerifyLevel> {
        match s {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            other => Err(MpgError::Config(format!(
                "unknown verify level '{other}' (expected fast or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
    pub all_pass: bool,
}

impl VerifyReport {
    pub fn render(&self, show_runtimes: bool) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            if show_runtimes {
                s.push_str(&format!(
                    "{status}  {:<42} {:>9.1} ms  {}\n",
                    c.name, c.runtime_ms, c.detail
                ));
            } else {
                s.push_str(&format!("{status}  {:<42} {}\n", c.name, c.detail));
            }
        }
        s.push_str(if self.all_pass {
            "all checks passed\n"
        } else {
            "SOME CHECKS FAILED\n"
        });
        s
    }
}

fn timed_check(
    checks: &mut Vec<VerifyCheck>,
    name: &str,
    f: impl FnOnce() -> Result<(bool, String)>,
) {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    checks.push(VerifyCheck {
        name: name.to_string(),
        pass,
        detail,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    });
}

/// Pins every step policy's tabular parameters so it reproduces the
/// given tables exactly: `theta(a,s) = tau * log(pi(a|s) / baseline)`.
pub fn pin_policy_to_tables(policy: &mut ExtendedPolicy, tables: &[PolicyTable]) {
    let n = policy.horizon();
    assert_eq!(tables.len(), n, "one table per step policy");
    for i in 1..=n {
        let tau = policy.step(i).tau();
        let baseline = policy.step(i).baseline().clone();
        let (na, ns) = (policy.step(i).n_actions(), policy.step(i).n_states());
        let step = policy.step_mut(i);
        for a in 0..na {
            for s in 0..ns {
                let idx = step.features().grid_index(a, s);
                step.theta[idx] = tau * (tables[i - 1].prob(a, s) / baseline.prob(a, s)).ln();
            }
        }
    }
}

/// Max relative error between the exact nested gradient and a central
/// finite difference of the objective, over every parameter coordinate
/// of every block. Relative to the gradient's largest magnitude.
pub fn gradient_fd_max_rel_err(
    mdp: &FiniteMdp,
    policy: &ExtendedPolicy,
    tau: f64,
    gamma: f64,
    h: f64,
) -> Result<f64> {
    let n = policy.horizon();
    let baseline = policy.step(1).baseline().clone();
    let mut probe = policy.clone();
    probe.set_tau(tau);
    let record = mpg_ideal_update(mdp, &mut probe, 1.0, tau, gamma)?;
    let scale = record
        .deltas
        .iter()
        .flatten()
        .fold(0.0f64, |m, d| m.max(d.abs()))
        .max(1e-8);
    let mut worst = 0.0f64;
    let mut work = policy.clone();
    work.set_tau(tau);
    for i in 1..=n {
        for j in 0..work.step(i).theta.len() {
            let theta0 = work.step(i).theta[j];
            work.step_mut(i).theta[j] = theta0 + h;
            let up = objective(mdp, &work.tables(), &baseline, tau, gamma)?;
            work.step_mut(i).theta[j] = theta0 - h;
            let down = objective(mdp, &work.tables(), &baseline, tau, gamma)?;
            work.step_mut(i).theta[j] = theta0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - record.deltas[i - 1][j]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Monte-Carlo check that the sampled update is unbiased for the exact
/// gradient: per coordinate, `|mean - grad| <= 3 sigma + slack`.
/// Returns `(worst excess over the bound in sigmas, pass)`.
pub fn unbiasedness_check(
    mdp: &FiniteMdp,
    horizon: usize,
    tau: f64,
    trials: usize,
    seed: u64,
) -> Result<(f64, bool)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut policy = ExtendedPolicy::for_mdp(mdp, horizon, tau);
    for i in 1..=horizon {
        for t in &mut policy.step_mut(i).theta {
            *t = rng.random_range(-0.3..0.3);
        }
    }
    let mut probe = policy.clone();
    let exact = mpg_ideal_update(mdp, &mut probe, 1.0, tau, 1.0)?.deltas;

    let dims: Vec<usize> = (1..=horizon).map(|i| policy.step(i).theta.len()).collect();
    let mut mean: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut m2: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    for t in 0..trials {
        let traj = sample_trajectory(mdp, &policy, &mut rng);
        let mut clone = policy.clone();
        let rec = mpg_sampled_update(&mut clone, &traj, 1.0, tau, 1.0, &BaselineState::zero(horizon))?;
        let w = 1.0 / (t + 1) as f64;
        for i in 0..horizon {
            for j in 0..dims[i] {
                let x = rec.deltas[i][j];
                let d = x - mean[i][j];
                mean[i][j] += w * d;
                m2[i][j] += d * (x - mean[i][j]);
            }
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..horizon {
        for j in 0..dims[i] {
            let var = m2[i][j] / (trials as f64 - 1.0);
            let se = (var / trials as f64).sqrt();
            let z = ((mean[i][j] - exact[i][j]).abs() - 1e-4) / se.max(1e-300);
            worst = worst.max(z);
        }
    }
    Ok((worst, worst <= 3.0))
}

/// Runs the cross-module identity and statistical checks. `corrupt_dp`
/// injects a fault into the dynamic-programming recursion results so
/// the log-sum-exp check must catch it (a self-test of the suite).
pub fn verify_suite_injected(level: VerifyLevel, corrupt_dp: bool) -> VerifyReport {
    let full = level == VerifyLevel::Full;
    let mut checks = Vec::new();

    timed_check(&mut checks, "soft-bellman log-sum-exp identity", || {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let reps = if full { 25 } else { 5 };
        let mut worst = 0.0f64;
        for _ in 0..reps {
            let mdp = random_mdp(rng.random_range(2..=6), rng.random_range(2..=4), &mut rng);
            let baseline = random_policy_table(mdp.n_states(), mdp.n_actions(), &mut rng);
            let tau = if rng.random_range(0..2) == 0 { 0.1 } else { 1.0 };
            let mut sol = solve_optimal(&mdp, &baseline, 4, tau, 1.0)?;
            if corrupt_dp {
                sol.v_star[2][0] += 1e-3;
            }
            worst = worst.max(lse_identity_max_err(&sol, &baseline));
        }
        Ok((worst < 1e-10, format!("max err {worst:.2e} (tol 1e-10)")))
    });

    timed_check(&mut checks, "value-gap identity", || {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let reps = if full { 25 } else { 5 };
        for _ in 0..reps {
            let mdp = random_mdp(rng.random_range(2..=5), rng.random_range(2..=3), &mut rng);
            let baseline = random_policy_table(mdp.n_states(), mdp.n_actions(), &mut rng);
            let tables: Vec<PolicyTable> = (0..3)
                .map(|_| random_policy_table(mdp.n_states(), mdp.n_actions(), &mut rng))
                .collect();
            value_gap(&mdp, &tables, &baseline, 0.3, 1.0, 1e-9)?;
        }
        Ok((true, format!("{reps} random policies within 1e-9")))
    });

    timed_check(&mut checks, "optimal-policy truncation consistency", || {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let reps = if full { 10 } else { 3 };
        let mut worst = 0.0f64;
        for _ in 0..reps {
            let mdp = random_mdp(4, 3, &mut rng);
            let baseline = random_policy_table(4, 3, &mut rng);
            let long = solve_optimal(&mdp, &baseline, 6, 0.5, 1.0)?;
            let cut = truncate_solution(&long, 3)?;
            let short = solve_optimal(&mdp, &baseline, 3, 0.5, 1.0)?;
            for i in 1..=3 {
                worst = worst.max(cut.pi(i).max_abs_diff(short.pi(i)));
            }
        }
        Ok((worst < 1e-10, format!("max policy diff {worst:.2e}")))
    });

    timed_check(&mut checks, "exact gradient vs finite differences", || {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let reps = if full { 10 } else { 2 };
        let mut worst = 0.0f64;
        for _ in 0..reps {
            let mdp = random_mdp(3, 2, &mut rng);
            let mut policy = ExtendedPolicy::for_mdp(&mdp, 3, 0.5);
            for i in 1..=3 {
                for t in &mut policy.step_mut(i).theta {
                    *t = rng.random_range(-0.5..0.5);
                }
            }
            worst = worst.max(gradient_fd_max_rel_err(&mdp, &policy, 0.5, 1.0, 1e-5)?);
        }
        Ok((worst < 1e-5, format!("max rel err {worst:.2e} (tol 1e-5)")))
    });

    timed_check(&mut checks, "sampled-update unbiasedness", || {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mdp = random_mdp(3, 2, &mut rng);
        let trials = if full { 100_000 } else { 20_000 };
        let (worst, pass) = unbiasedness_check(&mdp, 3, 0.5, trials, 16)?;
        Ok((pass, format!("worst deviation {worst:.2} sigma (bound 3)")))
    });

    timed_check(&mut checks, "optimality certificate", || {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mdp = random_mdp(4, 3, &mut rng);
        let baseline = PolicyTable::uniform(4, 3);
        let oracle = solve_optimal(&mdp, &baseline, 3, 0.5, 1.0)?;
        let mut policy = ExtendedPolicy::for_mdp(&mdp, 3, 0.5);
        pin_policy_to_tables(&mut policy, &oracle.pi_star);
        let at_opt = certify(&mdp, &policy, &oracle, 1e-6, LAMBDA_CUT_REL)?;
        let opt_pass = at_opt.iter().all(|r| r.pass);
        // perturb both directions so the residual cannot saturate away
        for i in 1..=3 {
            let dim = policy.step(i).theta.len();
            for (j, t) in policy.step_mut(i).theta.iter_mut().enumerate() {
                *t += if j < dim / 2 { 0.4 } else { -0.4 };
            }
        }
        let perturbed = certify(&mdp, &policy, &oracle, 1e-6, LAMBDA_CUT_REL)?;
        let caught = perturbed.iter().any(|r| r.residual_max > 1e-3);
        Ok((
            opt_pass && caught,
            format!(
                "at optimum max residual {:.2e}; perturbed max {:.2e}",
                at_opt.iter().fold(0.0f64, |m, r| m.max(r.residual_max)),
                perturbed.iter().fold(0.0f64, |m, r| m.max(r.residual_max)),
            ),
        ))
    });

    timed_check(&mut checks, "neural gradient finite differences", || {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let mlp = Mlp::new(&[5, 8, 1], 99)?;
        let mut worst = 0.0f64;
        for _ in 0..if full { 20 } else { 5 } {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grad = mlp.grad_params(&x)?;
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
            let flat = mlp.flat_params();
            let h = 1e-5;
            for j in 0..flat.len() {
                let mut probe = mlp.clone();
                let mut p = flat.clone();
                p[j] += h;
                probe.set_flat_params(&p)?;
                let up = probe.forward(&x)?;
                p[j] -= 2.0 * h;
                probe.set_flat_params(&p)?;
                let down = probe.forward(&x)?;
                worst = worst.max(((up - down) / (2.0 * h) - grad[j]).abs() / scale);
            }
        }
        Ok((worst < 1e-5, format!("max rel err {worst:.2e} (tol 1e-5)")))
    });

    timed_check(&mut checks, "tangent-kernel positive definiteness", || {
        let fl = frozen_lake_4x4();
        let width = if full { 256 } else { 64 };
        let mlp = Mlp::new(&[6, width, 1], 7)?;
        let mut inputs = Vec::new();
        for a in 0..4usize {
            for s in 0..fl.n_states() {
                let mut x = vec![0.0; 4];
                x[a] = 1.0;
                x.extend(fl.encode_cell(s));
                inputs.push(x);
            }
        }
        let gram = ntk_gram(&mlp, &inputs, crate::neural::NTK_TOL)?;
        let floor = 100.0 * f64::EPSILON * gram.max_eig;
        Ok((
            gram.min_eig > floor,
            format!("min eig {:.2e} > noise floor {:.2e}", gram.min_eig, floor),
        ))
    });

    let all_pass = checks.iter().all(|c| c.pass);
    VerifyReport { checks, all_pass }
}

pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    verify_suite_injected(level, false)
}
