//! Benchmark environments: multi-armed bandit, FrozenLake grid worlds
//! with reshaped rewards, and CartPole. FrozenLake also exports itself
//! as a `FiniteMdp`, so exact dynamic programming certifies the same
//! system that trajectory-based training interacts with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpgError, Result};
use crate::mdp::{FiniteMdp, RewardNoise};

/// Minimal environment contract: immutable spec, caller-owned state.
pub trait Environment {
    type State: Clone;
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;
    /// `(next_state, reward, terminal)`.
    fn step<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: usize,
        rng: &mut R,
    ) -> Result<(Self::State, f64, bool)>;
    fn action_count(&self) -> usize;
    /// Length of [`Environment::encode`] output.
    fn state_dim(&self) -> usize;
    /// Feature encoding handed to neural policies.
    fn encode(&self, state: &Self::State) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// Bandit

/// Single-state environment: `step(a)` returns `rewards[a]` plus
/// optional noise, never terminates.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub rewards: Vec<f64>,
    pub noise: Option<RewardNoise>,
}

pub fn bandit_env(rewards: Vec<f64>, noise: Option<RewardNoise>) -> Result<BanditEnv> {
    if rewards.is_empty() || rewards.iter().any(|r| !r.is_finite()) {
        return Err(MpgError::InvalidArgument(
            "bandit needs at least one finite arm reward".into(),
        ));
    }
    Ok(BanditEnv { rewards, noise })
}

impl BanditEnv {
    /// The equivalent one-state MDP (mean rewards, self-loop).
    pub fn as_mdp(&self) -> FiniteMdp {
        let na = self.rewards.len();
        let mut mdp = FiniteMdp::new(
            1,
            na,
            vec![1.0; na],
            self.rewards.clone(),
            vec![1.0],
            vec![false],
        )
        .expect("bandit MDP is well formed");
        mdp.reward_noise = self.noise;
        mdp
    }
}

impl Environment for BanditEnv {
    type State = ();

    fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> Self::State {}

    fn step<R: Rng + ?Sized>(
        &self,
        _state: &Self::State,
        action: usize,
        rng: &mut R,
    ) -> Result<(Self::State, f64, bool)> {
        if action >= self.rewards.len() {
            return Err(MpgError::InvalidArgument(format!(
                "action {action} out of range"
            )));
        }
        let mean = self.rewards[action];
        let reward = match self.noise {
            None => mean,
            Some(RewardNoise::Uniform { half_width }) => {
                mean + rng.random_range(-half_width..=half_width)
            }
            Some(RewardNoise::Gaussian { std }) => {
                use rand_distr::{Distribution, Normal};
                mean + Normal::new(0.0, std).expect("valid std").sample(rng)
            }
        };
        Ok(((), reward, false))
    }

    fn action_count(&self) -> usize {
        self.rewards.len()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn encode(&self, _state: &Self::State) -> Vec<f64> {
        vec![1.0]
    }
}

// ---------------------------------------------------------------------------
// FrozenLake

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Start,
    Frozen,
    Hole,
    Goal,
}

/// Reward shaping attached to the move outcomes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Shaping {
    /// Falling into a hole.
    pub lose: f64,
    /// Bumping into the grid boundary (position unchanged).
    pub wall: f64,
    /// A regular move onto frozen ground.
    pub step: f64,
    /// Reaching the goal.
    pub goal: f64,
}

impl Shaping {
    /// 4x4 shaping: lose -1, wall -0.05, move +0.05, goal +10.
    pub fn small() -> Self {
        Shaping {
            lose: -1.0,
            wall: -0.05,
            step: 0.05,
            goal: 10.0,
        }
    }

    /// 8x8 shaping overrides: wall -0.1, move +0.01.
    pub fn large() -> Self {
        Shaping {
            lose: -1.0,
            wall: -0.1,
            step: 0.01,
            goal: 10.0,
        }
    }
}

/// Grid actions in fixed order.
pub const FL_ACTIONS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub const FL_ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Debug, Clone)]
pub struct FrozenLakeSpec {
    pub size: usize,
    /// Row-major `size * size`.
    pub grid: Vec<Cell>,
    pub shaping: Shaping,
    pub start: usize,
    pub goal: usize,
    /// Neural state encoding: one-hot over cells instead of the compact
    /// `(row, col) / size` pair.
    pub one_hot: bool,
}

/// Parses an ASCII layout: rows of `S`/`F`/`H`/`G`, one string per row
/// or one `/`- or newline-separated block. Exactly one `S` and one `G`.
pub fn parse_layout(rows: &[&str], shaping: Shaping) -> Result<FrozenLakeSpec> {
    let size = rows.len();
    if size == 0 {
        return Err(MpgError::MalformedLayout("empty layout".into()));
    }
    let mut grid = Vec::with_capacity(size * size);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != size {
            return Err(MpgError::MalformedLayout(format!(
                "row {r} has length {}, expected {size}",
                row.len()
            )));
        }
        for ch in row.chars() {
            grid.push(match ch {
                'S' => Cell::Start,
                'F' => Cell::Frozen,
                'H' => Cell::Hole,
                'G' => Cell::Goal,
                other => {
                    return Err(MpgError::MalformedLayout(format!(
                        "unknown cell '{other}' in row {r}"
                    )))
                }
            });
        }
    }
    let starts: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == Cell::Start)
        .map(|(i, _)| i)
        .collect();
    let goals: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == Cell::Goal)
        .map(|(i, _)| i)
        .collect();
    if starts.len() != 1 || goals.len() != 1 {
        return Err(MpgError::MalformedLayout(format!(
            "need exactly one start and one goal, found {} and {}",
            starts.len(),
            goals.len()
        )));
    }
    Ok(FrozenLakeSpec {
        size,
        grid,
        shaping,
        start: starts[0],
        goal: goals[0],
        one_hot: false,
    })
}

/// The canonical 4x4 map.
pub fn frozen_lake_4x4() -> FrozenLakeSpec {
    parse_layout(&["SFFF", "FHFH", "FFFH", "HFFG"], Shaping::small()).expect("canonical layout")
}

/// The canonical 8x8 map.
pub fn frozen_lake_8x8() -> FrozenLakeSpec {
    parse_layout(
        &[
            "SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF", "FFFHFFFF", "FHHFFFHF", "FHFFHFHF",
            "FFFHFFFG",
        ],
        Shaping::large(),
    )
    .expect("canonical layout")
}

impl FrozenLakeSpec {
    pub fn n_states(&self) -> usize {
        self.size * self.size
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        matches!(self.grid[s], Cell::Hole | Cell::Goal)
    }

    /// Deterministic move outcome from a non-terminal state:
    /// `(next_state, reward, terminal)`.
    pub fn move_from(&self, s: usize, action: usize) -> (usize, f64, bool) {
        let k = self.size as i64;
        let (r, c) = ((s / self.size) as i64, (s % self.size) as i64);
        let (dr, dc) = FL_ACTIONS[action];
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nr >= k || nc < 0 || nc >= k {
            return (s, self.shaping.wall, false);
        }
        let s2 = (nr * k + nc) as usize;
        match self.grid[s2] {
            Cell::Hole => (s2, self.shaping.lose, true),
            Cell::Goal => (s2, self.shaping.goal, true),
            Cell::Frozen | Cell::Start => (s2, self.shaping.step, false),
        }
    }

    /// Breadth-first shortest start-to-goal distance in moves.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n_states()];
        let mut queue = std::collections::VecDeque::new();
        dist[self.start] = 0;
        queue.push_back(self.start);
        while let Some(s) = queue.pop_front() {
            if s == self.goal {
                return Some(dist[s]);
            }
            if self.is_terminal(s) {
                continue;
            }
            for a in 0..4 {
                let (s2, _, _) = self.move_from(s, a);
                if dist[s2] == usize::MAX {
                    dist[s2] = dist[s] + 1;
                    queue.push_back(s2);
                }
            }
        }
        None
    }

    /// Same map with the one-hot state encoding enabled.
    pub fn with_one_hot(mut self) -> Self {
        self.one_hot = true;
        self
    }

    /// State encoding for neural policies: one-hot over cells when
    /// `one_hot` is set, otherwise `(row, col) / size`.
    pub fn encode_cell(&self, s: usize) -> Vec<f64> {
        if self.one_hot {
            let mut v = vec![0.0; self.n_states()];
            v[s] = 1.0;
            return v;
        }
        vec![
            (s / self.size) as f64 / self.size as f64,
            (s % self.size) as f64 / self.size as f64,
        ]
    }
}

/// Exact finite-MDP export: deterministic transitions, terminal cells
/// absorb with zero reward, initial distribution a point mass at the
/// start (or uniform over non-terminal cells for theory tests).
pub fn frozenlake_as_mdp(spec: &FrozenLakeSpec, uniform_start: bool) -> Result<FiniteMdp> {
    let ns = spec.n_states();
    let na = 4;
    let mut transition = vec![0.0; ns * na * ns];
    let mut mean_reward = vec![0.0; na * ns];
    let mut terminal = vec![false; ns];
    for s in 0..ns {
        if spec.is_terminal(s) {
            terminal[s] = true;
            for a in 0..na {
                transition[(s * na + a) * ns + s] = 1.0;
            }
            continue;
        }
        for a in 0..na {
            let (s2, r, _) = spec.move_from(s, a);
            transition[(s * na + a) * ns + s2] = 1.0;
            mean_reward[a * ns + s] = r;
        }
    }
    let initial_dist = if uniform_start {
        let free: Vec<usize> = (0..ns).filter(|&s| !terminal[s]).collect();
        let w = 1.0 / free.len() as f64;
        let mut d = vec![0.0; ns];
        for s in free {
            d[s] = w;
        }
        d
    } else {
        let mut d = vec![0.0; ns];
        d[spec.start] = 1.0;
        d
    };
    FiniteMdp::new(ns, na, transition, mean_reward, initial_dist, terminal)
}

impl Environment for FrozenLakeSpec {
    type State = usize;

    fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> Self::State {
        self.start
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: usize,
        _rng: &mut R,
    ) -> Result<(Self::State, f64, bool)> {
        if action >= 4 {
            return Err(MpgError::InvalidArgument(format!(
                "action {action} out of range"
            )));
        }
        if self.is_terminal(*state) {
            // absorbing semantics: stay put, zero reward
            return Ok((*state, 0.0, true));
        }
        let (s2, r, done) = self.move_from(*state, action);
        Ok((s2, r, done))
    }

    fn action_count(&self) -> usize {
        4
    }

    fn state_dim(&self) -> usize {
        if self.one_hot {
            self.n_states()
        } else {
            2
        }
    }

    fn encode(&self, state: &Self::State) -> Vec<f64> {
        self.encode_cell(*state)
    }
}

// ---------------------------------------------------------------------------
// CartPole

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

/// Classic control constants; Euler integration.
#[derive(Debug, Clone, Copy)]
pub struct CartPole {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    pub half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub x_limit: f64,
    pub theta_limit: f64,
    /// Reward on the step that leaves the admissible region.
    pub failure_penalty: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            x_limit: 2.4,
            theta_limit: 12.0f64.to_radians(),
            failure_penalty: -10.0,
        }
    }
}

impl CartPole {
    pub fn is_terminal(&self, s: &CartPoleState) -> bool {
        s.x.abs() > self.x_limit || s.theta.abs() > self.theta_limit
    }

    /// Deterministic dynamics step; errors on a terminal input state.
    pub fn cartpole_step(
        &self,
        s: &CartPoleState,
        action: usize,
    ) -> Result<(CartPoleState, f64, bool)> {
        if action >= 2 {
            return Err(MpgError::InvalidArgument(format!(
                "action {action} out of range"
            )));
        }
        if self.is_terminal(s) {
            return Err(MpgError::InvalidArgument(
                "cannot step a terminal cart-pole state".into(),
            ));
        }
        let force = if action == 1 {
            self.force_mag
        } else {
            -self.force_mag
        };
        let total_mass = self.mass_cart + self.mass_pole;
        let pole_mass_length = self.mass_pole * self.half_length;
        let (sin_t, cos_t) = s.theta.sin_cos();
        let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
        let theta_acc = (self.gravity * sin_t - cos_t * temp)
            / (self.half_length * (4.0 / 3.0 - self.mass_pole * cos_t * cos_t / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;
        let next = CartPoleState {
            x: s.x + self.dt * s.x_dot,
            x_dot: s.x_dot + self.dt * x_acc,
            theta: s.theta + self.dt * s.theta_dot,
            theta_dot: s.theta_dot + self.dt * theta_acc,
        };
        if self.is_terminal(&next) {
            Ok((next, self.failure_penalty, true))
        } else {
            Ok((next, 1.0, false))
        }
    }
}

impl Environment for CartPole {
    type State = CartPoleState;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State {
        CartPoleState {
            x: rng.random_range(-0.05..0.05),
            x_dot: rng.random_range(-0.05..0.05),
            theta: rng.random_range(-0.05..0.05),
            theta_dot: rng.random_range(-0.05..0.05),
        }
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: usize,
        _rng: &mut R,
    ) -> Result<(Self::State, f64, bool)> {
        if self.is_terminal(state) {
            // absorbing semantics for fixed-length trajectories
            return Ok((*state, 0.0, true));
        }
        self.cartpole_step(state, action)
    }

    fn action_count(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        4
    }

    /// Raw state scaled by (2.4, 3.0, 0.21, 3.0).
    fn encode(&self, s: &Self::State) -> Vec<f64> {
        vec![s.x / 2.4, s.x_dot / 3.0, s.theta / 0.21, s.theta_dot / 3.0]
    }
}
