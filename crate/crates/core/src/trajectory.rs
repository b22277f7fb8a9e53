//! Fixed-horizon trajectories, discounted functionals, normalization and
//! dataset windowing.
//!
//! Layout is time-major: step `t` occupies `[t * w, (t + 1) * w)` with
//! `w = state_dim + action_dim`, the state block first and the action block
//! after it. Discrete states and actions are one-hot blocks.

use serde::{Deserialize, Serialize};

use crate::cmdp::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(horizon: usize, state_dim: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        let expected = horizon * (state_dim + action_dim);
        if data.len() != expected {
            return Err(Error::Shape {
                expected,
                got: data.len(),
                context: "trajectory buffer",
            });
        }
        Ok(Trajectory {
            horizon,
            state_dim,
            action_dim,
            data,
        })
    }

    pub fn zeros(horizon: usize, state_dim: usize, action_dim: usize) -> Self {
        Trajectory {
            horizon,
            state_dim,
            action_dim,
            data: vec![0.0; horizon * (state_dim + action_dim)],
        }
    }

    #[inline]
    pub fn transition_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Total number of coordinates.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let w = self.transition_dim();
        &self.data[t * w..t * w + self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        let w = self.transition_dim();
        &self.data[t * w + self.state_dim..(t + 1) * w]
    }

    pub fn state_mut(&mut self, t: usize) -> &mut [f64] {
        let w = self.transition_dim();
        &mut self.data[t * w..t * w + self.state_dim]
    }

    pub fn action_mut(&mut self, t: usize) -> &mut [f64] {
        let w = self.transition_dim();
        let sd = self.state_dim;
        &mut self.data[t * w + sd..(t + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `sum_t gamma^t values[t]`.
pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for v in values {
        total += weight * v;
        weight *= gamma;
    }
    total
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    discounted_sum(rewards, gamma)
}

pub fn discounted_cost(costs: &[f64], gamma: f64) -> f64 {
    debug_assert!(costs.iter().all(|&c| c >= 0.0), "costs must be non-negative");
    discounted_sum(costs, gamma)
}

/// Discounted functional of a trajectory under a per-step function of
/// `(state block, action block)`.
pub fn discounted_functional(traj: &Trajectory, gamma: f64, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let values: Vec<f64> = (0..traj.horizon).map(|t| f(traj.state(t), traj.action(t))).collect();
    discounted_sum(&values, gamma)
}

/// A length-H segment of one episode with Monte-Carlo to-go labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Feature-encoded segment in raw (unnormalized) units.
    pub traj: Trajectory,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    /// Discounted reward from the window start to the end of the episode.
    pub reward_to_go: f64,
    /// Discounted cost from the window start to the end of the episode.
    pub cost_to_go: f64,
    pub episode: usize,
    pub start: usize,
    pub dones: Vec<bool>,
}

/// All contiguous length-`horizon` segments inside each episode.
pub fn make_windows(dataset: &Dataset, horizon: usize) -> Result<Vec<Window>> {
    if horizon == 0 {
        return Err(Error::Config("window horizon must be at least 1".into()));
    }
    let env = dataset.env();
    let gamma = env.gamma();
    let (sd, ad) = (env.state_feature_dim(), env.action_feature_dim());
    let longest = dataset.episodes.iter().map(Vec::len).max().unwrap_or(0);
    if horizon > longest {
        return Err(Error::EmptyWindows { horizon, longest });
    }
    let mut windows = Vec::new();
    for (e, ep) in dataset.episodes.iter().enumerate() {
        if ep.len() < horizon {
            continue;
        }
        let rewards: Vec<f64> = ep.iter().map(|t| t.r).collect();
        let costs: Vec<f64> = ep.iter().map(|t| t.c).collect();
        // Suffix sums: to_go[k] = sum_{j >= k} gamma^{j-k} x_j.
        let suffix = |xs: &[f64]| {
            let mut out = vec![0.0; xs.len() + 1];
            for k in (0..xs.len()).rev() {
                out[k] = xs[k] + gamma * out[k + 1];
            }
            out
        };
        let reward_to_go = suffix(&rewards);
        let cost_to_go = suffix(&costs);
        let encoded: Vec<f64> = ep
            .iter()
            .flat_map(|t| {
                let mut row = env.state_features(&t.s);
                row.extend(env.action_features(&t.a));
                row
            })
            .collect();
        let w = sd + ad;
        for start in 0..=ep.len() - horizon {
            let data = encoded[start * w..(start + horizon) * w].to_vec();
            windows.push(Window {
                traj: Trajectory::new(horizon, sd, ad, data)?,
                rewards: rewards[start..start + horizon].to_vec(),
                costs: costs[start..start + horizon].to_vec(),
                reward_to_go: reward_to_go[start],
                cost_to_go: cost_to_go[start],
                episode: e,
                start,
                dones: ep[start..start + horizon].iter().map(|t| t.done).collect(),
            });
        }
    }
    Ok(windows)
}

/// Per-feature affine map onto `[-1, 1]`, shared across time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub state_dim: usize,
}

impl Normalizer {
    pub fn fit(windows: &[Window]) -> Result<Self> {
        let first = windows.first().ok_or(Error::EmptyInput("normalizer windows"))?;
        let w = first.traj.transition_dim();
        let mut min = vec![f64::INFINITY; w];
        let mut max = vec![f64::NEG_INFINITY; w];
        for win in windows {
            for (k, &v) in win.traj.as_slice().iter().enumerate() {
                let d = k % w;
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        Ok(Normalizer {
            min,
            max,
            state_dim: first.traj.state_dim,
        })
    }

    pub fn identity(dim: usize, state_dim: usize) -> Self {
        Normalizer {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
            state_dim,
        }
    }

    pub fn transition_dim(&self) -> usize {
        self.min.len()
    }

    #[inline]
    fn forward(&self, d: usize, v: f64) -> f64 {
        let range = self.max[d] - self.min[d];
        if range > 0.0 {
            2.0 * (v - self.min[d]) / range - 1.0
        } else {
            v - self.min[d]
        }
    }

    #[inline]
    fn inverse(&self, d: usize, v: f64) -> f64 {
        let range = self.max[d] - self.min[d];
        if range > 0.0 {
            (v + 1.0) * 0.5 * range + self.min[d]
        } else {
            v + self.min[d]
        }
    }

    pub fn normalize(&self, traj: &Trajectory) -> Trajectory {
        let w = self.transition_dim();
        let mut out = traj.clone();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v = self.forward(k % w, *v);
        }
        out
    }

    pub fn denormalize(&self, traj: &Trajectory) -> Trajectory {
        let w = self.transition_dim();
        let mut out = traj.clone();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v = self.inverse(k % w, *v);
        }
        out
    }

    /// Normalizes a state feature block.
    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().enumerate().map(|(d, &v)| self.forward(d, v)).collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &v)| self.inverse(self.state_dim + d, v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{collect_dataset, BehaviorPolicy, Dataset, Environment, Transition};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_dataset(lengths: &[usize]) -> Dataset {
        let env = Environment::by_name("grid-budget").unwrap();
        let episodes = lengths
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|t| Transition {
                        s: vec![(t % 9) as f64],
                        a: vec![(t % 4) as f64],
                        s_next: vec![((t + 1) % 9) as f64],
                        r: 1.0,
                        c: (t % 2) as f64,
                        done: t + 1 == n,
                    })
                    .collect()
            })
            .collect();
        Dataset::new(&env, "test".into(), episodes)
    }

    #[test]
    fn discounted_examples() {
        assert_eq!(discounted_return(&[1.0; 5], 1.0), 5.0);
        assert_eq!(discounted_return(&[1.0, 1.0], 0.5), 1.5);
        assert_eq!(discounted_cost(&[0.0; 4], 0.9), 0.0);
        let c = discounted_cost(&[0.0, 2.0], 1.0);
        assert_eq!(c, 2.0);
        assert!(c > 1.0, "violates a budget of 1");
    }

    #[test]
    fn discounted_sum_matches_closed_form_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let gamma: f64 = rng.random_range(0.0..1.0);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let direct: f64 = xs.iter().enumerate().map(|(t, x)| gamma.powi(t as i32) * x).sum();
            assert!((discounted_sum(&xs, gamma) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&grid_dataset(&[5]), 5).unwrap().len(), 1);
        assert_eq!(make_windows(&grid_dataset(&[6]), 4).unwrap().len(), 3);
        assert_eq!(make_windows(&grid_dataset(&[6, 2, 4]), 4).unwrap().len(), 4);
        assert!(matches!(
            make_windows(&grid_dataset(&[3, 2]), 4),
            Err(Error::EmptyWindows { horizon: 4, longest: 3 })
        ));
    }

    #[test]
    fn windows_never_contain_interior_done() {
        let env = Environment::by_name("grid-budget").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = collect_dataset(&env, &BehaviorPolicy::UniformRandom, 30, &mut rng).unwrap();
        for h in 1..=4 {
            for w in make_windows(&ds, h).unwrap() {
                assert!(w.dones[..h - 1].iter().all(|d| !d));
            }
        }
    }

    #[test]
    fn full_length_window_return_equals_episode_return() {
        let env = Environment::by_name("reach-avoid").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = collect_dataset(&env, &BehaviorPolicy::default_for(&env), 5, &mut rng).unwrap();
        let windows = make_windows(&ds, env.max_len()).unwrap();
        let returns = ds.episode_returns();
        let costs = ds.episode_costs();
        for w in &windows {
            let gamma = env.gamma();
            assert!((discounted_return(&w.rewards, gamma) - returns[w.episode]).abs() < 1e-12);
            assert!((w.reward_to_go - returns[w.episode]).abs() < 1e-9);
            assert!((w.cost_to_go - costs[w.episode]).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_windows_lie_in_unit_box_and_round_trip() {
        let env = Environment::by_name("reach-avoid").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = collect_dataset(&env, &BehaviorPolicy::default_for(&env), 20, &mut rng).unwrap();
        let windows = make_windows(&ds, 8).unwrap();
        let norm = Normalizer::fit(&windows).unwrap();
        for w in &windows {
            let n = norm.normalize(&w.traj);
            assert!(n.as_slice().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            let back = norm.denormalize(&n);
            for (a, b) in back.as_slice().iter().zip(w.traj.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn normalizer_round_trips(values in prop::collection::vec(-50.0f64..50.0, 6..60)) {
            let n = values.len() / 3 * 3;
            let traj = Trajectory::new(n / 3, 2, 1, values[..n].to_vec()).unwrap();
            let window = Window {
                traj: traj.clone(),
                rewards: vec![0.0; n / 3],
                costs: vec![0.0; n / 3],
                reward_to_go: 0.0,
                cost_to_go: 0.0,
                episode: 0,
                start: 0,
                dones: vec![false; n / 3],
            };
            let norm = Normalizer::fit(std::slice::from_ref(&window)).unwrap();
            let back = norm.denormalize(&norm.normalize(&traj));
            for (a, b) in back.as_slice().iter().zip(traj.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
