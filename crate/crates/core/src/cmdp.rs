//! Constrained MDP definitions, built-in environments, behavior policies and
//! offline dataset collection.
//!
//! States and actions travel as `Vec<f64>`. Discrete environments use a single
//! coordinate holding the index; [`Environment::state_features`] and
//! [`Environment::action_features`] turn them into one-hot blocks for the
//! trajectory model.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Static description of a CMDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub name: String,
    /// Raw state/action widths (1 for index-coded discrete spaces).
    pub state_dim: usize,
    pub action_dim: usize,
    /// `(|S|, |A|)` for discrete environments.
    pub cardinality: Option<(usize, usize)>,
    pub gamma: f64,
    pub max_len: usize,
    pub reward_bound: f64,
    pub cost_bound: f64,
}

impl CmdpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max episode length must be at least 1".into()));
        }
        if self.reward_bound < 0.0 || self.cost_bound < 0.0 {
            return Err(Error::Config("reward/cost bounds must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest discounted episodic cost any rollout can reach.
    pub fn max_episode_cost(&self) -> f64 {
        let terms = self.max_len as u32 + 1;
        if self.gamma == 1.0 {
            terms as f64 * self.cost_bound
        } else {
            self.cost_bound * (1.0 - self.gamma.powi(terms as i32)) / (1.0 - self.gamma)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub state: Vec<f64>,
    pub t: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub c: f64,
    pub done: bool,
}

/// A finite CMDP given by explicit tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularCmdp {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub initial: Vec<f64>,
    /// `transitions[s * n_actions + a]` lists `(s', probability)`.
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub gamma: f64,
    pub max_len: usize,
}

impl TabularCmdp {
    pub fn validate(&self) -> Result<()> {
        let pairs = self.n_states * self.n_actions;
        if self.initial.len() != self.n_states
            || self.transitions.len() != pairs
            || self.reward.len() != pairs
            || self.cost.len() != pairs
        {
            return Err(Error::Config(format!("tabular CMDP '{}' has inconsistent table sizes", self.name)));
        }
        let mass: f64 = self.initial.iter().sum();
        if (mass - 1.0).abs() > 1e-9 || self.initial.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("initial distribution must be a probability vector".into()));
        }
        for (k, row) in self.transitions.iter().enumerate() {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&(s, p)| s >= self.n_states || p < 0.0) {
                return Err(Error::Config(format!("transition row {k} is not a distribution over states")));
            }
        }
        if self.cost.iter().any(|&c| c < 0.0) {
            return Err(Error::Config("costs must be non-negative".into()));
        }
        self.spec().validate()
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn is_deterministic(&self) -> bool {
        self.transitions.iter().all(|row| row.iter().filter(|(_, p)| *p > 0.0).count() == 1)
    }

    pub fn spec(&self) -> CmdpSpec {
        CmdpSpec {
            name: self.name.clone(),
            state_dim: 1,
            action_dim: 1,
            cardinality: Some((self.n_states, self.n_actions)),
            gamma: self.gamma,
            max_len: self.max_len,
            reward_bound: self.reward.iter().fold(0.0, |m, r| m.max(r.abs())),
            cost_bound: self.cost.iter().fold(0.0, |m: f64, c| m.max(*c)),
        }
    }

    fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = (usize, f64)>, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (idx, p) in probs {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = idx;
            if u < acc {
                return idx;
            }
        }
        last
    }
}

/// 3x3 grid with two start cells, one goal and two hazard cells.
///
/// ```text
///   S  H  .
///   .  H  G
///   S  .  .
/// ```
///
/// Actions are up/down/left/right; moves into a wall leave the agent in
/// place. With probability `slip` the move goes in one of the three other
/// directions instead (uniformly). Reward and cost of `(s, a)` are the
/// probabilities of landing on the goal and on a hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBudget {
    pub slip: f64,
    pub max_len: usize,
}

impl Default for GridBudget {
    fn default() -> Self {
        GridBudget { slip: 0.0, max_len: 4 }
    }
}

impl GridBudget {
    pub const SIDE: usize = 3;
    pub const N_ACTIONS: usize = 4;
    pub const STARTS: [usize; 2] = [0, 6];
    pub const GOAL: usize = 5;
    pub const HAZARDS: [usize; 2] = [1, 4];

    pub fn slippery() -> Self {
        GridBudget { slip: 0.1, max_len: 4 }
    }

    /// Cell reached by moving from `s` in direction `a` (0 up, 1 down, 2 left, 3 right).
    pub fn intended(s: usize, a: usize) -> usize {
        let (row, col) = (s / Self::SIDE, s % Self::SIDE);
        let (row, col) = match a {
            0 => (row.saturating_sub(1), col),
            1 => ((row + 1).min(Self::SIDE - 1), col),
            2 => (row, col.saturating_sub(1)),
            _ => (row, (col + 1).min(Self::SIDE - 1)),
        };
        row * Self::SIDE + col
    }

    /// Shortest-path action toward the goal, ignoring hazards.
    pub fn greedy_action(s: usize) -> usize {
        let (row, col) = (s / Self::SIDE, s % Self::SIDE);
        let (goal_row, goal_col) = (Self::GOAL / Self::SIDE, Self::GOAL % Self::SIDE);
        if col < goal_col {
            3
        } else if row < goal_row {
            1
        } else if row > goal_row {
            0
        } else {
            3
        }
    }

    fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(4);
        let mut push = |cell: usize, p: f64| {
            if p <= 0.0 {
                return;
            }
            match out.iter_mut().find(|(c, _)| *c == cell) {
                Some(entry) => entry.1 += p,
                None => out.push((cell, p)),
            }
        };
        push(Self::intended(s, a), 1.0 - self.slip);
        for other in (0..Self::N_ACTIONS).filter(|&o| o != a) {
            push(Self::intended(s, other), self.slip / 3.0);
        }
        out.sort_by_key(|(c, _)| *c);
        out
    }

    pub fn tabular(&self) -> TabularCmdp {
        let n_states = Self::SIDE * Self::SIDE;
        let mut initial = vec![0.0; n_states];
        for &s in &Self::STARTS {
            initial[s] = 1.0 / Self::STARTS.len() as f64;
        }
        let mut transitions = Vec::with_capacity(n_states * Self::N_ACTIONS);
        let mut reward = Vec::with_capacity(n_states * Self::N_ACTIONS);
        let mut cost = Vec::with_capacity(n_states * Self::N_ACTIONS);
        for s in 0..n_states {
            for a in 0..Self::N_ACTIONS {
                let row = self.successors(s, a);
                reward.push(row.iter().filter(|(c, _)| *c == Self::GOAL).map(|(_, p)| p).sum());
                cost.push(row.iter().filter(|(c, _)| Self::HAZARDS.contains(c)).map(|(_, p)| p).sum());
                transitions.push(row);
            }
        }
        TabularCmdp {
            name: if self.slip > 0.0 { "grid-budget-slip".into() } else { "grid-budget".into() },
            n_states,
            n_actions: Self::N_ACTIONS,
            initial,
            transitions,
            reward,
            cost,
            gamma: 1.0,
            max_len: self.max_len,
        }
    }
}

/// Deterministic 2-D point mass that must reach a goal past a circular hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachAvoid {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub hazard_center: [f64; 2],
    pub hazard_radius: f64,
    /// Peak per-step cost at the hazard center.
    pub hazard_cost: f64,
    /// Euclidean bound on a single velocity step.
    pub max_step: f64,
    pub max_len: usize,
    pub gamma: f64,
}

impl Default for ReachAvoid {
    fn default() -> Self {
        ReachAvoid {
            start: [-0.7, 0.0],
            goal: [0.7, 0.0],
            hazard_center: [0.0, 0.0],
            hazard_radius: 0.35,
            hazard_cost: 1.0,
            max_step: 0.1,
            max_len: 32,
            gamma: 0.99,
        }
    }
}

impl ReachAvoid {
    /// Smooth bump `hazard_cost * (1 - (d/rho)^2)^2` inside the hazard, zero outside.
    pub fn cost_at(&self, p: [f64; 2]) -> f64 {
        let d2 = (p[0] - self.hazard_center[0]).powi(2) + (p[1] - self.hazard_center[1]).powi(2);
        let rho2 = self.hazard_radius * self.hazard_radius;
        if d2 >= rho2 {
            0.0
        } else {
            let u = 1.0 - d2 / rho2;
            self.hazard_cost * u * u
        }
    }

    pub fn reward_at(&self, p: [f64; 2]) -> f64 {
        -((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Projects a raw action onto the admissible velocity ball.
    pub fn clip_action(&self, a: [f64; 2]) -> [f64; 2] {
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
        if norm > self.max_step {
            [a[0] * self.max_step / norm, a[1] * self.max_step / norm]
        } else {
            a
        }
    }

    pub fn next_position(&self, s: [f64; 2], a: [f64; 2]) -> [f64; 2] {
        let a = self.clip_action(a);
        [(s[0] + a[0]).clamp(-1.0, 1.0), (s[1] + a[1]).clamp(-1.0, 1.0)]
    }

    pub fn spec(&self) -> CmdpSpec {
        CmdpSpec {
            name: "reach-avoid".into(),
            state_dim: 2,
            action_dim: 2,
            cardinality: None,
            gamma: self.gamma,
            max_len: self.max_len,
            reward_bound: 2.0 * std::f64::consts::SQRT_2,
            cost_bound: self.hazard_cost,
        }
    }
}

/// The environment registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Environment {
    GridBudget(GridBudget),
    ReachAvoid(ReachAvoid),
    Tabular(TabularCmdp),
}

impl Environment {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grid-budget" => Ok(Environment::GridBudget(GridBudget::default())),
            "grid-budget-slip" => Ok(Environment::GridBudget(GridBudget::slippery())),
            "reach-avoid" => Ok(Environment::ReachAvoid(ReachAvoid::default())),
            other => Err(Error::Config(format!(
                "unknown environment '{other}' (known: grid-budget, grid-budget-slip, reach-avoid)"
            ))),
        }
    }

    pub fn spec(&self) -> CmdpSpec {
        match self {
            Environment::GridBudget(g) => g.tabular().spec(),
            Environment::ReachAvoid(r) => r.spec(),
            Environment::Tabular(t) => t.spec(),
        }
    }

    pub fn name(&self) -> String {
        self.spec().name
    }

    pub fn gamma(&self) -> f64 {
        self.spec().gamma
    }

    pub fn max_len(&self) -> usize {
        self.spec().max_len
    }

    /// Tabular form for discrete environments.
    pub fn tabular(&self) -> Option<TabularCmdp> {
        match self {
            Environment::GridBudget(g) => Some(g.tabular()),
            Environment::Tabular(t) => Some(t.clone()),
            Environment::ReachAvoid(_) => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Environment::ReachAvoid(_))
    }

    /// Stable fingerprint of the environment definition.
    pub fn spec_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("environment serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let state = match self {
            Environment::ReachAvoid(r) => r.start.to_vec(),
            Environment::GridBudget(g) => {
                let table = g.tabular();
                vec![TabularCmdp::sample_index(table.initial.iter().copied().enumerate(), rng) as f64]
            }
            Environment::Tabular(t) => vec![TabularCmdp::sample_index(t.initial.iter().copied().enumerate(), rng) as f64],
        };
        EnvState { state, t: 0, done: false }
    }

    fn discrete_action(&self, action: &[f64], n_actions: usize) -> Result<usize> {
        match action {
            [a] if a.is_finite() && *a >= 0.0 && a.fract() == 0.0 && (*a as usize) < n_actions => Ok(*a as usize),
            _ => Err(Error::EnvUsage(format!("invalid discrete action {action:?}"))),
        }
    }

    /// Advances `state` by one step.
    pub fn step<R: Rng + ?Sized>(&self, state: &mut EnvState, action: &[f64], rng: &mut R) -> Result<Transition> {
        if state.done {
            return Err(Error::EnvUsage("step called on a finished episode".into()));
        }
        let max_len = self.max_len();
        let (s_next, r, c) = match self {
            Environment::ReachAvoid(env) => {
                let a: [f64; 2] = match action {
                    [x, y] if x.is_finite() && y.is_finite() => [*x, *y],
                    _ => return Err(Error::EnvUsage(format!("invalid continuous action {action:?}"))),
                };
                let s = [state.state[0], state.state[1]];
                let next = env.next_position(s, a);
                (next.to_vec(), env.reward_at(next), env.cost_at(next))
            }
            Environment::GridBudget(_) | Environment::Tabular(_) => {
                let table = self.tabular().expect("discrete");
                let a = self.discrete_action(action, table.n_actions)?;
                let s = state.state[0] as usize;
                let k = table.pair(s, a);
                let next = TabularCmdp::sample_index(table.transitions[k].iter().copied(), rng);
                (vec![next as f64], table.reward[k], table.cost[k])
            }
        };
        let transition = Transition {
            s: state.state.clone(),
            a: action.to_vec(),
            s_next: s_next.clone(),
            r,
            c,
            done: state.t + 1 >= max_len,
        };
        state.state = s_next;
        state.t += 1;
        state.done = transition.done;
        Ok(transition)
    }

    pub fn state_feature_dim(&self) -> usize {
        match self.spec().cardinality {
            Some((n, _)) => n,
            None => self.spec().state_dim,
        }
    }

    pub fn action_feature_dim(&self) -> usize {
        match self.spec().cardinality {
            Some((_, n)) => n,
            None => self.spec().action_dim,
        }
    }

    pub fn state_features(&self, s: &[f64]) -> Vec<f64> {
        match self.spec().cardinality {
            Some((n, _)) => one_hot(s[0] as usize, n),
            None => s.to_vec(),
        }
    }

    pub fn action_features(&self, a: &[f64]) -> Vec<f64> {
        match self.spec().cardinality {
            Some((_, n)) => one_hot(a[0] as usize, n),
            None => a.to_vec(),
        }
    }

    /// Maps a planned action block back to an executable action: argmax for
    /// discrete spaces, projection onto the admissible set otherwise.
    pub fn action_from_features(&self, f: &[f64]) -> Vec<f64> {
        match self {
            Environment::ReachAvoid(env) => env.clip_action([f[0], f[1]]).to_vec(),
            _ => vec![argmax(f) as f64],
        }
    }

    pub fn state_from_features(&self, f: &[f64]) -> Vec<f64> {
        if self.is_discrete() {
            vec![argmax(f) as f64]
        } else {
            f.to_vec()
        }
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Unconstrained behavior policies used to generate offline data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorPolicy {
    /// Uniformly random actions (discrete environments only).
    UniformRandom,
    /// Shortest path to the goal ignoring hazards, with probability
    /// `epsilon` of a uniformly random action.
    EpsilonGreedy { epsilon: f64 },
    /// Head for a randomly drawn via-point beside the hazard, then for the
    /// goal, at full speed with Gaussian action noise.
    ViaPoint { max_offset: f64, noise_std: f64 },
}

impl BehaviorPolicy {
    pub fn tag(&self) -> String {
        match self {
            BehaviorPolicy::UniformRandom => "uniform-random".into(),
            BehaviorPolicy::EpsilonGreedy { epsilon } => format!("epsilon-greedy({epsilon})"),
            BehaviorPolicy::ViaPoint { max_offset, noise_std } => format!("via-point({max_offset},{noise_std})"),
        }
    }

    pub fn default_for(env: &Environment) -> Self {
        match env {
            Environment::ReachAvoid(_) => BehaviorPolicy::ViaPoint {
                max_offset: 0.7,
                noise_std: 0.03,
            },
            Environment::GridBudget(_) => BehaviorPolicy::EpsilonGreedy { epsilon: 0.3 },
            Environment::Tabular(_) => BehaviorPolicy::UniformRandom,
        }
    }

    fn controller<R: Rng + ?Sized>(&self, env: &Environment, rng: &mut R) -> Result<Controller> {
        match (self, env) {
            (BehaviorPolicy::ViaPoint { max_offset, noise_std }, Environment::ReachAvoid(ra)) => {
                let offset = rng.random_range(-max_offset..=*max_offset);
                Ok(Controller::ViaPoint {
                    waypoint: [ra.hazard_center[0], ra.hazard_center[1] + offset],
                    passed: false,
                    noise: Normal::new(0.0, *noise_std).map_err(|e| Error::Config(e.to_string()))?,
                })
            }
            (BehaviorPolicy::ViaPoint { .. }, _) => Err(Error::Config("via-point behavior needs reach-avoid".into())),
            (BehaviorPolicy::UniformRandom | BehaviorPolicy::EpsilonGreedy { .. }, Environment::ReachAvoid(_)) => Err(
                Error::Config("discrete behavior policies need a discrete environment".into()),
            ),
            (BehaviorPolicy::UniformRandom, _) => Ok(Controller::Random),
            (BehaviorPolicy::EpsilonGreedy { epsilon }, _) => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
                }
                Ok(Controller::EpsilonGreedy { epsilon: *epsilon })
            }
        }
    }
}

enum Controller {
    Random,
    EpsilonGreedy {
        epsilon: f64,
    },
    ViaPoint {
        waypoint: [f64; 2],
        passed: bool,
        noise: Normal<f64>,
    },
}

impl Controller {
    fn act<R: Rng + ?Sized>(&mut self, env: &Environment, s: &[f64], rng: &mut R) -> Vec<f64> {
        match (self, env) {
            (Controller::ViaPoint { waypoint, passed, noise }, Environment::ReachAvoid(ra)) => {
                if s[0] >= waypoint[0] - 0.05 {
                    *passed = true;
                }
                let target = if *passed { ra.goal } else { *waypoint };
                let (dx, dy) = (target[0] - s[0], target[1] - s[1]);
                let dist = (dx * dx + dy * dy).sqrt();
                let speed = ra.max_step.min(dist);
                let (ux, uy) = if dist > 1e-12 { (dx / dist, dy / dist) } else { (0.0, 0.0) };
                let raw = [ux * speed + noise.sample(rng), uy * speed + noise.sample(rng)];
                ra.clip_action(raw).to_vec()
            }
            (Controller::EpsilonGreedy { epsilon }, env) => {
                let n = env.action_feature_dim();
                let greedy = match env {
                    Environment::GridBudget(_) => GridBudget::greedy_action(s[0] as usize),
                    _ => 0,
                };
                if rng.random::<f64>() < *epsilon {
                    vec![rng.random_range(0..n) as f64]
                } else {
                    vec![greedy as f64]
                }
            }
            (Controller::Random, env) => vec![rng.random_range(0..env.action_feature_dim()) as f64],
            (Controller::ViaPoint { .. }, _) => unreachable!("checked when the controller is built"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub env: Environment,
    pub env_hash: String,
    pub behavior: String,
    pub episodes: usize,
}

/// Episode-segmented offline transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Vec<Transition>>,
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    episode: usize,
    t: usize,
    #[serde(flatten)]
    transition: Transition,
}

impl Dataset {
    pub fn new(env: &Environment, behavior: String, episodes: Vec<Vec<Transition>>) -> Self {
        Dataset {
            header: DatasetHeader {
                schema_version: DATASET_SCHEMA_VERSION,
                env: env.clone(),
                env_hash: env.spec_hash(),
                behavior,
                episodes: episodes.len(),
            },
            episodes,
        }
    }

    pub fn env(&self) -> &Environment {
        &self.header.env
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    /// Discounted episodic costs, one per episode.
    pub fn episode_costs(&self) -> Vec<f64> {
        let gamma = self.header.env.gamma();
        self.episodes
            .iter()
            .map(|ep| ep.iter().enumerate().map(|(t, tr)| gamma.powi(t as i32) * tr.c).sum())
            .collect()
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        let gamma = self.header.env.gamma();
        self.episodes
            .iter()
            .map(|ep| ep.iter().enumerate().map(|(t, tr)| gamma.powi(t as i32) * tr.r).sum())
            .collect()
    }

    /// Writes the JSON-lines layout: a header line followed by one record
    /// per transition.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| {
            serde_json::to_writer(&mut *w, &self.header)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            for (episode, ep) in self.episodes.iter().enumerate() {
                for (t, tr) in ep.iter().enumerate() {
                    let record = TransitionRecord {
                        episode,
                        t,
                        transition: tr.clone(),
                    };
                    serde_json::to_writer(&mut *w, &record)?;
                    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "dataset schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        if header.env_hash != header.env.spec_hash() {
            return Err(Error::Format("dataset env hash does not match its environment".into()));
        }
        let mut episodes: Vec<Vec<Transition>> = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TransitionRecord = serde_json::from_str(&line)?;
            if record.episode == episodes.len() {
                episodes.push(Vec::new());
            }
            let ep = episodes
                .get_mut(record.episode)
                .ok_or_else(|| Error::Format(format!("episode {} out of order", record.episode)))?;
            if record.t != ep.len() {
                return Err(Error::Format(format!("step {} of episode {} out of order", record.t, record.episode)));
            }
            ep.push(record.transition);
        }
        if episodes.len() != header.episodes {
            return Err(Error::Format(format!(
                "header announces {} episodes, file holds {}",
                header.episodes,
                episodes.len()
            )));
        }
        Ok(Dataset { header, episodes })
    }
}

/// Rolls out `policy` for `episodes` full episodes.
pub fn collect_dataset<R: Rng + ?Sized>(
    env: &Environment,
    policy: &BehaviorPolicy,
    episodes: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Config("collect at least one episode".into()));
    }
    env.spec().validate()?;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut controller = policy.controller(env, rng)?;
        let mut state = env.reset(rng);
        let mut ep = Vec::with_capacity(env.max_len());
        while !state.done {
            let action = controller.act(env, &state.state, rng);
            ep.push(env.step(&mut state, &action, rng)?);
        }
        out.push(ep);
    }
    Ok(Dataset::new(env, policy.tag(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reach_avoid_reset_is_point_mass() {
        let env = Environment::by_name("reach-avoid").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = env.reset(&mut rng);
        for _ in 0..10 {
            assert_eq!(env.reset(&mut rng), first);
        }
    }

    #[test]
    fn grid_reset_splits_between_starts() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let top = (0..n).filter(|_| env.reset(&mut rng).state[0] == 0.0).count() as f64;
        // 3 sigma of a fair binomial.
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((top - n as f64 / 2.0).abs() < 3.0 * sigma, "{top}");
    }

    #[test]
    fn seeded_resets_reproduce() {
        let env = Environment::by_name("grid-budget").unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| env.reset(&mut rng).state[0]).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn reach_avoid_costs() {
        let ra = ReachAvoid::default();
        let env = Environment::ReachAvoid(ra.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = env.reset(&mut rng);
        let tr = env.step(&mut state, &[0.1, 0.0], &mut rng).unwrap();
        assert_eq!(tr.c, 0.0);
        assert!((tr.s_next[0] + 0.6).abs() < 1e-12);

        // Inside the hazard at distance 0.1 from its center:
        // (1 - (0.1/0.35)^2)^2 = (1 - 0.0816326530612245)^2.
        let mut inside = EnvState {
            state: vec![-0.2, 0.0],
            t: 3,
            done: false,
        };
        let tr = env.step(&mut inside, &[0.1, 0.0], &mut rng).unwrap();
        let expected = (1.0f64 - 0.01 / 0.1225).powi(2);
        assert!((tr.c - expected).abs() < 1e-12);
        assert!((tr.c - 0.843398583923365).abs() < 1e-12);
    }

    #[test]
    fn grid_deterministic_move() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = EnvState {
            state: vec![0.0],
            t: 0,
            done: false,
        };
        let tr = env.step(&mut state, &[3.0], &mut rng).unwrap();
        assert_eq!(tr.s_next, vec![1.0]);
        assert_eq!(tr.c, 1.0);
        let tr = env.step(&mut state, &[0.0], &mut rng).unwrap();
        assert_eq!(tr.s_next, vec![1.0], "moving into the wall stays put");
    }

    #[test]
    fn step_after_done_is_an_error() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = env.reset(&mut rng);
        for _ in 0..4 {
            env.step(&mut state, &[1.0], &mut rng).unwrap();
        }
        assert!(state.done);
        assert!(matches!(env.step(&mut state, &[1.0], &mut rng), Err(Error::EnvUsage(_))));
    }

    #[test]
    fn invalid_actions_rejected() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = env.reset(&mut rng);
        assert!(env.step(&mut state, &[4.0], &mut rng).is_err());
        assert!(env.step(&mut state, &[0.5], &mut rng).is_err());
        let ra = Environment::by_name("reach-avoid").unwrap();
        let mut state = ra.reset(&mut rng);
        assert!(ra.step(&mut state, &[f64::NAN, 0.0], &mut rng).is_err());
    }

    #[test]
    fn slip_table_rows_are_distributions() {
        let t = GridBudget::slippery().tabular();
        t.validate().unwrap();
        assert!(!t.is_deterministic());
        assert!(GridBudget::default().tabular().is_deterministic());
    }

    #[test]
    fn single_deterministic_episode_has_full_length() {
        let env = Environment::by_name("reach-avoid").unwrap();
        let policy = BehaviorPolicy::ViaPoint {
            max_offset: 0.0,
            noise_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = collect_dataset(&env, &policy, 1, &mut rng).unwrap();
        assert_eq!(ds.num_transitions(), env.max_len());
        assert!(ds.episodes[0].last().unwrap().done);
        assert!(ds.episodes[0][..env.max_len() - 1].iter().all(|t| !t.done));
    }

    #[test]
    fn epsilon_greedy_covers_all_actions() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = collect_dataset(&env, &BehaviorPolicy::EpsilonGreedy { epsilon: 0.3 }, 500, &mut rng).unwrap();
        for a in 0..4 {
            assert!(ds.transitions().any(|t| t.a[0] as usize == a), "action {a} missing");
        }
    }

    #[test]
    fn shipped_behavior_data_spans_safe_and_unsafe_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for env in [Environment::by_name("reach-avoid").unwrap(), Environment::by_name("grid-budget").unwrap()] {
            let ds = collect_dataset(&env, &BehaviorPolicy::default_for(&env), 300, &mut rng).unwrap();
            let costs = ds.episode_costs();
            let max = costs.iter().cloned().fold(0.0, f64::max);
            assert!(costs.iter().any(|&c| c == 0.0), "no zero-cost episodes");
            assert!(costs.iter().any(|&c| c > 0.5 * max), "no high-cost episodes");
        }
    }

    #[test]
    fn episodic_cost_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for env in [
            Environment::by_name("reach-avoid").unwrap(),
            Environment::by_name("grid-budget-slip").unwrap(),
        ] {
            let ds = collect_dataset(&env, &BehaviorPolicy::default_for(&env), 200, &mut rng).unwrap();
            let bound = env.spec().max_episode_cost();
            assert!(ds.episode_costs().iter().all(|&c| c <= bound));
        }
    }

    #[test]
    fn zero_episodes_rejected() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(collect_dataset(&env, &BehaviorPolicy::UniformRandom, 0, &mut rng).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let env = Environment::by_name("grid-budget-slip").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = collect_dataset(&env, &BehaviorPolicy::EpsilonGreedy { epsilon: 0.2 }, 7, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
