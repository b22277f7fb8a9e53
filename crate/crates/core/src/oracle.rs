//! Exact computations on small discrete CMDPs.
//!
//! Trajectories are sequences of `L` state-action pairs `(s_0, a_0, ...,
//! s_{L-1}, a_{L-1})`; the final successor state is marginalized out. The
//! behavior distribution uses the empirical initial distribution, the
//! empirical policy `N(s,a)/N(s)` and the empirical dynamics
//! `N(s,a,s')/N(s,a)`, so every enumerated trajectory has positive
//! probability under the dataset.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cmdp::{Dataset, TabularCmdp};
use crate::error::{Error, Result};
use crate::guide::{smoothed_objective, GuideConfig};

/// Largest `|A|^L` the enumerator accepts.
pub const MAX_ACTION_SEQUENCES: f64 = 1e6;

/// Visit counts, stored as reals so they can be rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub n_states: usize,
    pub n_actions: usize,
    /// `N(s, a)` indexed by `s * n_actions + a`.
    pub sa: Vec<f64>,
    /// `N(s, a, s')` indexed by `(s * n_actions + a) * n_states + s'`.
    pub sas: Vec<f64>,
    /// Episode start counts.
    pub initial: Vec<f64>,
    /// Sum of observed costs per pair.
    pub cost_sum: Vec<f64>,
}

impl Counts {
    pub fn from_dataset(env: &TabularCmdp, dataset: &Dataset) -> Result<Self> {
        let (ns, na) = (env.n_states, env.n_actions);
        let mut counts = Counts {
            n_states: ns,
            n_actions: na,
            sa: vec![0.0; ns * na],
            sas: vec![0.0; ns * na * ns],
            initial: vec![0.0; ns],
            cost_sum: vec![0.0; ns * na],
        };
        let index = |v: &[f64], bound: usize, what: &str| -> Result<usize> {
            match v {
                [x] if *x >= 0.0 && x.fract() == 0.0 && (*x as usize) < bound => Ok(*x as usize),
                _ => Err(Error::Format(format!("dataset {what} {v:?} is not a valid index"))),
            }
        };
        for ep in &dataset.episodes {
            if let Some(first) = ep.first() {
                counts.initial[index(&first.s, ns, "state")?] += 1.0;
            }
            for tr in ep {
                let s = index(&tr.s, ns, "state")?;
                let a = index(&tr.a, na, "action")?;
                let s2 = index(&tr.s_next, ns, "state")?;
                let k = s * na + a;
                counts.sa[k] += 1.0;
                counts.sas[k * ns + s2] += 1.0;
                counts.cost_sum[k] += tr.c;
            }
        }
        if counts.initial.iter().sum::<f64>() == 0.0 {
            return Err(Error::EmptyInput("dataset episodes"));
        }
        Ok(counts)
    }

    /// Every count multiplied by `factor`; empirical ratios are unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let m = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect();
        Counts {
            n_states: self.n_states,
            n_actions: self.n_actions,
            sa: m(&self.sa),
            sas: m(&self.sas),
            initial: m(&self.initial),
            cost_sum: m(&self.cost_sum),
        }
    }

    pub fn n_s(&self, s: usize) -> f64 {
        self.sa[s * self.n_actions..(s + 1) * self.n_actions].iter().sum()
    }

    pub fn n_sa(&self, s: usize, a: usize) -> f64 {
        self.sa[s * self.n_actions + a]
    }

    pub fn pi_hat(&self, s: usize, a: usize) -> f64 {
        self.n_sa(s, a) / self.n_s(s)
    }

    pub fn t_hat(&self, s: usize, a: usize, s2: usize) -> f64 {
        let k = s * self.n_actions + a;
        self.sas[k * self.n_states + s2] / self.sa[k]
    }

    pub fn p0_hat(&self, s: usize) -> f64 {
        self.initial[s] / self.initial.iter().sum::<f64>()
    }

    pub fn c_hat(&self, s: usize, a: usize) -> f64 {
        let k = s * self.n_actions + a;
        self.cost_sum[k] / self.sa[k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Behavior probability under the empirical model.
    pub p: f64,
    /// Discounted reward and cost under the true reward/cost tables.
    pub reward: f64,
    pub cost: f64,
    /// Discounted cost under the empirical mean costs.
    pub cost_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub env: TabularCmdp,
    pub counts: Counts,
    pub length: usize,
    pub entries: Vec<TrajectoryEntry>,
}

/// Enumerates every trajectory with positive empirical probability.
pub fn enumerate(env: &TabularCmdp, dataset: &Dataset) -> Result<TrajectoryTable> {
    enumerate_counts(env, Counts::from_dataset(env, dataset)?)
}

pub fn enumerate_counts(env: &TabularCmdp, counts: Counts) -> Result<TrajectoryTable> {
    env.validate()?;
    let length = env.max_len;
    if (env.n_actions as f64).powi(length as i32) > MAX_ACTION_SEQUENCES {
        return Err(Error::Config(format!(
            "|A|^L = {}^{} exceeds the enumeration limit {MAX_ACTION_SEQUENCES}",
            env.n_actions, length
        )));
    }
    let mut entries = Vec::new();
    let mut states = Vec::with_capacity(length);
    let mut actions = Vec::with_capacity(length);
    for s0 in 0..env.n_states {
        let p0 = counts.p0_hat(s0);
        if p0 > 0.0 {
            walk(env, &counts, length, s0, p0, &mut states, &mut actions, &mut entries)?;
        }
    }
    let total: f64 = entries.iter().map(|e| e.p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::OracleInternal(format!("enumerated mass {total} differs from 1")));
    }
    Ok(TrajectoryTable {
        env: env.clone(),
        counts,
        length,
        entries,
    })
}

#[allow(clippy::too_many_arguments)]
fn walk(
    env: &TabularCmdp,
    counts: &Counts,
    length: usize,
    s: usize,
    p: f64,
    states: &mut Vec<usize>,
    actions: &mut Vec<usize>,
    out: &mut Vec<TrajectoryEntry>,
) -> Result<()> {
    if counts.n_s(s) == 0.0 {
        return Err(Error::OracleInternal(format!(
            "state {s} is reachable under the empirical model but was never visited"
        )));
    }
    states.push(s);
    for a in 0..env.n_actions {
        let pa = counts.pi_hat(s, a);
        if pa == 0.0 {
            continue;
        }
        actions.push(a);
        if states.len() == length {
            let (mut reward, mut cost, mut cost_hat, mut disc) = (0.0, 0.0, 0.0, 1.0);
            for (&st, &at) in states.iter().zip(actions.iter()) {
                let k = env.pair(st, at);
                reward += disc * env.reward[k];
                cost += disc * env.cost[k];
                cost_hat += disc * counts.c_hat(st, at);
                disc *= env.gamma;
            }
            out.push(TrajectoryEntry {
                states: states.clone(),
                actions: actions.clone(),
                p: p * pa,
                reward,
                cost,
                cost_hat,
            });
        } else {
            for s2 in 0..env.n_states {
                let pt = counts.t_hat(s, a, s2);
                if pt > 0.0 {
                    walk(env, counts, length, s2, p * pa * pt, states, actions, out)?;
                }
            }
        }
        actions.pop();
    }
    states.pop();
    Ok(())
}

impl TrajectoryTable {
    pub fn probabilities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p).collect()
    }

    pub fn max_cost(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.cost))
    }

    /// Behavior mass on `C(tau) <= b`.
    pub fn safe_mass(&self, budget: f64) -> f64 {
        self.entries.iter().filter(|e| e.cost <= budget).map(|e| e.p).sum()
    }

    pub fn expected_reward(&self, q: &[f64]) -> f64 {
        self.entries.iter().zip(q).map(|(e, q)| q * e.reward).sum()
    }

    pub fn expected_cost(&self, q: &[f64]) -> f64 {
        self.entries.iter().zip(q).map(|(e, q)| q * e.cost).sum()
    }

    /// Mass of `q` on `C(tau) > b`.
    pub fn unsafe_mass(&self, q: &[f64], budget: f64) -> f64 {
        self.entries.iter().zip(q).filter(|(e, _)| e.cost > budget).map(|(_, q)| q).sum()
    }

    /// `KL(q || p_behavior)`; infinite if `q` leaves the behavior support.
    pub fn kl_to_behavior(&self, q: &[f64]) -> f64 {
        kl(q, &self.probabilities())
    }
}

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&q, &p)| {
            if q == 0.0 {
                0.0
            } else if p == 0.0 {
                f64::INFINITY
            } else {
                q * (q / p).ln()
            }
        })
        .sum()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// A distribution over the rows of a [`TrajectoryTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDistribution {
    pub q: Vec<f64>,
    pub alpha: f64,
    /// Normalizing constant of the tilted weights.
    pub z: f64,
    pub budget: f64,
    /// Penalty weight for the smoothed form; `None` for the hard constraint.
    pub n: Option<f64>,
    /// Achieved `KL(q || p_behavior)`.
    pub epsilon: f64,
}

/// `q*_b(tau) = p(tau) exp(alpha R(tau)) / Z` on `C(tau) <= b`, zero elsewhere.
pub fn optimal_q(table: &TrajectoryTable, budget: f64, alpha: f64) -> Result<OptimalDistribution> {
    let safe = |e: &TrajectoryEntry| e.cost <= budget;
    if !table.entries.iter().any(|e| safe(e) && e.p > 0.0) {
        return Err(Error::InfeasibleBudget { budget });
    }
    let shift = table.entries.iter().filter(|e| safe(e)).fold(f64::NEG_INFINITY, |m, e| m.max(alpha * e.reward));
    let weights: Vec<f64> = table
        .entries
        .iter()
        .map(|e| if safe(e) { e.p * (alpha * e.reward - shift).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let epsilon = table.kl_to_behavior(&q);
    Ok(OptimalDistribution {
        q,
        alpha,
        z: total * shift.exp(),
        budget,
        n: None,
        epsilon,
    })
}

/// `safe_mass(b) >= exp(-eps)`.
pub fn feasibility(table: &TrajectoryTable, budget: f64, eps: f64) -> bool {
    table.safe_mass(budget) >= (-eps).exp()
}

/// `q*_{b,n}(tau) ∝ p(tau) exp(alpha (R - n 1[C > b] (C - b)))` over all rows.
pub fn smoothed_q(table: &TrajectoryTable, budget: f64, alpha: f64, n: f64) -> OptimalDistribution {
    let cfg = GuideConfig { alpha, n };
    let logits: Vec<f64> = table
        .entries
        .iter()
        .map(|e| alpha * smoothed_objective(e.reward, e.cost, &cfg, budget))
        .collect();
    let shift = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let weights: Vec<f64> = table.entries.iter().zip(&logits).map(|(e, l)| e.p * (l - shift).exp()).collect();
    let total: f64 = weights.iter().sum();
    let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let epsilon = table.kl_to_behavior(&q);
    OptimalDistribution {
        q,
        alpha,
        z: total * shift.exp(),
        budget,
        n: Some(n),
        epsilon,
    }
}

/// Largest deviation of `log q - log p - alpha R` from its mean over the
/// support of `q`.
pub fn stationarity_spread(table: &TrajectoryTable, opt: &OptimalDistribution) -> f64 {
    let vals: Vec<f64> = table
        .entries
        .iter()
        .zip(&opt.q)
        .filter(|(_, &q)| q > 0.0)
        .map(|(e, &q)| q.ln() - e.p.ln() - opt.alpha * e.reward)
        .collect();
    let lo = vals.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = vals.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    hi - lo
}

/// A random distribution with support inside `{C <= b}` and
/// `KL(q || p) <= eps`, obtained by mixing the renormalized safe behavior
/// distribution with a random direction and shrinking toward the former.
pub fn random_feasible_q<R: Rng + ?Sized>(table: &TrajectoryTable, budget: f64, eps: f64, rng: &mut R) -> Result<Vec<f64>> {
    let safe_mass = table.safe_mass(budget);
    if safe_mass == 0.0 {
        return Err(Error::InfeasibleBudget { budget });
    }
    let base: Vec<f64> = table
        .entries
        .iter()
        .map(|e| if e.cost <= budget { e.p / safe_mass } else { 0.0 })
        .collect();
    let p = table.probabilities();
    if kl(&base, &p) > eps + 1e-12 {
        return Err(Error::Config(format!("no distribution on the safe set has KL <= {eps}")));
    }
    // Random direction: either exponential weights or a random tilt of the base.
    let mut dir: Vec<f64> = if rng.random_bool(0.5) {
        base.iter()
            .map(|&b| if b > 0.0 { -rng.random::<f64>().max(1e-300).ln() } else { 0.0 })
            .collect()
    } else {
        let scale: f64 = rng.random_range(0.0..6.0);
        base.iter()
            .map(|&b| if b > 0.0 { b * (scale * rng.sample::<f64, _>(StandardNormal)).exp() } else { 0.0 })
            .collect()
    };
    let total: f64 = dir.iter().sum();
    dir.iter_mut().for_each(|d| *d /= total);
    let mix = |lam: f64| -> Vec<f64> { base.iter().zip(&dir).map(|(b, d)| (1.0 - lam) * b + lam * d).collect() };
    // KL is convex along the segment, so the feasible set is an interval [0, hi].
    let hi = if kl(&mix(1.0), &p) <= eps {
        1.0
    } else {
        let (mut lo, mut up) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + up);
            if kl(&mix(mid), &p) <= eps {
                lo = mid;
            } else {
                up = mid;
            }
        }
        lo
    };
    let lam = rng.random_range(0.0..=1.0) * hi;
    Ok(mix(lam))
}

/// Policy induced by a trajectory distribution: the conditional action
/// distribution given the history prefix. Histories with zero mass fall
/// back to the empirical behavior policy, or uniform at unvisited states.
pub struct HistoryPolicy<'a> {
    table: &'a TrajectoryTable,
    mass: HashMap<Vec<usize>, f64>,
}

impl<'a> HistoryPolicy<'a> {
    pub fn new(table: &'a TrajectoryTable, q: &[f64]) -> Self {
        let mut mass: HashMap<Vec<usize>, f64> = HashMap::new();
        for (e, &w) in table.entries.iter().zip(q) {
            if w == 0.0 {
                continue;
            }
            let mut key = Vec::with_capacity(2 * e.states.len());
            for (s, a) in e.states.iter().zip(&e.actions) {
                key.push(*s);
                *mass.entry(key.clone()).or_default() += w;
                key.push(*a);
                *mass.entry(key.clone()).or_default() += w;
            }
        }
        HistoryPolicy { table, mass }
    }

    /// Action distribution at `history` (ending with the current state).
    pub fn action_probs(&self, history: &[usize]) -> Vec<f64> {
        let na = self.table.env.n_actions;
        let s = *history.last().expect("history ends with a state");
        if let Some(&m) = self.mass.get(history) {
            if m > 0.0 {
                let mut key = history.to_vec();
                return (0..na)
                    .map(|a| {
                        key.push(a);
                        let v = self.mass.get(&key).copied().unwrap_or(0.0) / m;
                        key.pop();
                        v
                    })
                    .collect();
            }
        }
        let counts = &self.table.counts;
        if counts.n_s(s) > 0.0 {
            (0..na).map(|a| counts.pi_hat(s, a)).collect()
        } else {
            vec![1.0 / na as f64; na]
        }
    }
}

/// Which transition model to roll out under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    True,
    Empirical,
}

/// Exact expectations of one policy under one transition model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `J(pi) = E[sum_t gamma^t r(s_t, a_t)]`.
    pub value: f64,
    pub cost: f64,
    /// `E[sum_t gamma^t / sqrt(N(s_t, a_t))]`, `None` if an unvisited pair
    /// has positive probability.
    pub inverse_sqrt_count: Option<f64>,
    pub first_unvisited: Option<(usize, usize)>,
}

/// Enumerates all histories of length `L` under `dynamics` from the true
/// initial distribution (initial-state differences are ignored).
pub fn exact_rollout(table: &TrajectoryTable, policy: &HistoryPolicy<'_>, dynamics: Dynamics) -> Rollout {
    let mut acc = Rollout {
        value: 0.0,
        cost: 0.0,
        inverse_sqrt_count: Some(0.0),
        first_unvisited: None,
    };
    let mut history = Vec::with_capacity(2 * table.length);
    for s0 in 0..table.env.n_states {
        let p0 = table.env.initial[s0];
        if p0 > 0.0 {
            rollout_rec(table, policy, dynamics, s0, 0, p0, &mut history, &mut acc);
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn rollout_rec(
    table: &TrajectoryTable,
    policy: &HistoryPolicy<'_>,
    dynamics: Dynamics,
    s: usize,
    t: usize,
    p: f64,
    history: &mut Vec<usize>,
    acc: &mut Rollout,
) {
    let env = &table.env;
    let disc = env.gamma.powi(t as i32);
    history.push(s);
    let probs = policy.action_probs(history);
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let w = p * pa;
        let k = env.pair(s, a);
        acc.value += w * disc * env.reward[k];
        acc.cost += w * disc * env.cost[k];
        let n = table.counts.sa[k];
        if n > 0.0 {
            if let Some(v) = acc.inverse_sqrt_count.as_mut() {
                *v += w * disc / n.sqrt();
            }
        } else {
            acc.inverse_sqrt_count = None;
            acc.first_unvisited.get_or_insert((s, a));
        }
        if t + 1 < table.length {
            history.push(a);
            match dynamics {
                Dynamics::True => {
                    for &(s2, pt) in &env.transitions[k] {
                        if pt > 0.0 {
                            rollout_rec(table, policy, dynamics, s2, t + 1, w * pt, history, acc);
                        }
                    }
                }
                Dynamics::Empirical => {
                    if n > 0.0 {
                        for s2 in 0..env.n_states {
                            let pt = table.counts.t_hat(s, a, s2);
                            if pt > 0.0 {
                                rollout_rec(table, policy, dynamics, s2, t + 1, w * pt, history, acc);
                            }
                        }
                    }
                }
            }
            history.pop();
        }
    }
    history.pop();
}

/// Concentration constants and confidence level for the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub c_t: f64,
    pub c_c: f64,
    pub delta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_t >= 0.0 && self.c_c >= 0.0) {
            return Err(Error::Config("concentration constants must be non-negative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// `max_{(s,a): N>0} sqrt(N(s,a)) * TV(T(.|s,a), T_hat(.|s,a))`.
pub fn fit_c_t(table: &TrajectoryTable) -> f64 {
    let env = &table.env;
    let c = &table.counts;
    let mut best: f64 = 0.0;
    for s in 0..env.n_states {
        for a in 0..env.n_actions {
            let n = c.n_sa(s, a);
            if n == 0.0 {
                continue;
            }
            let mut truth = vec![0.0; env.n_states];
            for &(s2, p) in &env.transitions[env.pair(s, a)] {
                truth[s2] += p;
            }
            let est: Vec<f64> = (0..env.n_states).map(|s2| c.t_hat(s, a, s2)).collect();
            best = best.max(n.sqrt() * total_variation(&truth, &est));
        }
    }
    best
}

/// Cost constant for Gaussian observation noise of scale `sigma`:
/// the two-sided `1 - delta` quantile times `sigma`.
pub fn c_c_from_noise(sigma: f64, delta: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    sigma * normal.inverse_cdf(1.0 - delta / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardGapBound {
    /// `2 R_m H_1 sqrt(L eps / 2)`, zero for deterministic dynamics.
    pub kl_term: f64,
    /// `2 R_m H_2 C_T E[sum_t gamma^t / sqrt(N)]`.
    pub uncertainty_term: f64,
    pub total: f64,
}

/// Horizon factors `((1 - gamma^{L+1}) / (1 - gamma), 1 / (1 - gamma))`,
/// both `L + 1` at `gamma = 1`.
fn horizon_factors(gamma: f64, length: usize) -> (f64, f64) {
    if gamma < 1.0 {
        ((1.0 - gamma.powi(length as i32 + 1)) / (1.0 - gamma), 1.0 / (1.0 - gamma))
    } else {
        let h = (length + 1) as f64;
        (h, h)
    }
}

/// Upper bound on `|J_{T_hat}(pi) - J_T(pi)|` for the policy induced by `q`.
pub fn reward_gap_bound(table: &TrajectoryTable, q: &[f64], inputs: &BoundInputs, eps: f64) -> Result<RewardGapBound> {
    inputs.validate()?;
    let policy = HistoryPolicy::new(table, q);
    let rollout = exact_rollout(table, &policy, Dynamics::Empirical);
    let e = match (rollout.inverse_sqrt_count, rollout.first_unvisited) {
        (Some(e), _) => e,
        (None, Some((state, action))) => return Err(Error::UndefinedBound { state, action }),
        (None, None) => return Err(Error::OracleInternal("missing unvisited pair".into())),
    };
    let env = &table.env;
    let r_max = env.spec().reward_bound;
    let (h1, h2) = horizon_factors(env.gamma, table.length);
    let kl_term = if env.is_deterministic() {
        0.0
    } else {
        2.0 * r_max * h1 * (table.length as f64 * eps.max(0.0) / 2.0).sqrt()
    };
    let uncertainty_term = 2.0 * r_max * h2 * inputs.c_t * e;
    Ok(RewardGapBound {
        kl_term,
        uncertainty_term,
        total: kl_term + uncertainty_term,
    })
}

/// Exact `|J_{T_hat}(pi) - J_T(pi)|` for the policy induced by `q`.
pub fn reward_gap(table: &TrajectoryTable, q: &[f64]) -> (f64, f64, f64) {
    let policy = HistoryPolicy::new(table, q);
    let truth = exact_rollout(table, &policy, Dynamics::True).value;
    let model = exact_rollout(table, &policy, Dynamics::Empirical).value;
    ((model - truth).abs(), truth, model)
}

/// `sum_t gamma^t C_c / sqrt(N(s_t, a_t))` along a pair sequence.
pub fn cost_gap_bound(counts: &Counts, gamma: f64, states: &[usize], actions: &[usize], c_c: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut disc = 1.0;
    for (&s, &a) in states.iter().zip(actions) {
        let n = counts.n_sa(s, a);
        if n == 0.0 {
            return Err(Error::UndefinedBound { state: s, action: a });
        }
        total += disc * c_c / n.sqrt();
        disc *= gamma;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub covered: usize,
    pub fraction: f64,
    pub c_c: f64,
}

/// Noisy-cost trials: each trial redraws the empirical mean cost of every
/// pair from `N` observations with Gaussian noise `sigma`, samples a
/// trajectory from `q`, and checks `|C - C_hat| <= cost_gap_bound`.
pub fn noisy_cost_coverage<R: Rng + ?Sized>(
    table: &TrajectoryTable,
    q: &[f64],
    sigma: f64,
    delta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<CoverageReport> {
    if trials == 0 {
        return Err(Error::EmptyInput("noisy-cost trials"));
    }
    let env = &table.env;
    let c_c = c_c_from_noise(sigma, delta);
    let pairs = env.n_states * env.n_actions;
    let mut covered = 0;
    let cumulative: Vec<f64> = q
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&0.0);
    for _ in 0..trials {
        // Mean of N draws of N(0, sigma^2) is N(0, sigma^2 / N).
        let noise: Vec<f64> = (0..pairs)
            .map(|k| {
                let n = table.counts.sa[k];
                if n > 0.0 {
                    sigma / n.sqrt() * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        let u = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u).min(q.len() - 1);
        let e = &table.entries[idx];
        let (mut gap, mut disc) = (0.0, 1.0);
        for (&s, &a) in e.states.iter().zip(&e.actions) {
            gap += disc * noise[env.pair(s, a)];
            disc *= env.gamma;
        }
        let bound = cost_gap_bound(&table.counts, env.gamma, &e.states, &e.actions, c_c)?;
        if gap.abs() <= bound {
            covered += 1;
        }
    }
    Ok(CoverageReport {
        trials,
        covered,
        fraction: covered as f64 / trials as f64,
        c_c,
    })
}

/// Per-budget summary exported by the oracle command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget: f64,
    pub safe_mass: f64,
    pub feasible: bool,
    pub alpha: f64,
    pub epsilon: f64,
    pub z: f64,
    pub support: usize,
    pub expected_reward: f64,
    pub expected_cost: f64,
    pub behavior_reward: f64,
    pub unsafe_mass: Vec<(f64, f64)>,
    pub tv_to_hard: Vec<(f64, f64)>,
    pub stationarity_spread: f64,
    pub reward_gap: f64,
    pub reward_gap_bound: RewardGapBound,
    pub max_cost_gap_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub env: String,
    pub trajectories: usize,
    pub max_cost: f64,
    pub c_t: f64,
    pub c_c: f64,
    pub delta: f64,
    pub budgets: Vec<BudgetReport>,
}

/// Evaluates `q*_b`, its smoothed versions and the bounds at each budget.
/// `c_t = None` fits the transition constant from the data.
pub fn report(
    table: &TrajectoryTable,
    budgets: &[f64],
    alpha: f64,
    penalties: &[f64],
    c_t: Option<f64>,
    c_c: f64,
    delta: f64,
) -> Result<OracleReport> {
    let inputs = BoundInputs {
        c_t: c_t.unwrap_or_else(|| fit_c_t(table)),
        c_c,
        delta,
    };
    inputs.validate()?;
    let p = table.probabilities();
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let opt = optimal_q(table, b, alpha)?;
        let mut unsafe_mass = Vec::new();
        let mut tv_to_hard = Vec::new();
        for &n in penalties {
            let sq = smoothed_q(table, b, alpha, n);
            unsafe_mass.push((n, table.unsafe_mass(&sq.q, b)));
            tv_to_hard.push((n, total_variation(&sq.q, &opt.q)));
        }
        let bound = reward_gap_bound(table, &opt.q, &inputs, opt.epsilon)?;
        let (gap, _, _) = reward_gap(table, &opt.q);
        let mut max_cost_bound: f64 = 0.0;
        for (e, &w) in table.entries.iter().zip(&opt.q) {
            if w > 0.0 {
                max_cost_bound = max_cost_bound.max(cost_gap_bound(&table.counts, table.env.gamma, &e.states, &e.actions, c_c)?);
            }
        }
        out.push(BudgetReport {
            budget: b,
            safe_mass: table.safe_mass(b),
            feasible: feasibility(table, b, opt.epsilon),
            alpha,
            epsilon: opt.epsilon,
            z: opt.z,
            support: opt.q.iter().filter(|&&q| q > 0.0).count(),
            expected_reward: table.expected_reward(&opt.q),
            expected_cost: table.expected_cost(&opt.q),
            behavior_reward: table.expected_reward(&p),
            unsafe_mass,
            tv_to_hard,
            stationarity_spread: stationarity_spread(table, &opt),
            reward_gap: gap,
            reward_gap_bound: bound,
            max_cost_gap_bound: max_cost_bound,
        });
    }
    Ok(OracleReport {
        env: table.env.name.clone(),
        trajectories: table.entries.len(),
        max_cost: table.max_cost(),
        c_t: inputs.c_t,
        c_c,
        delta,
        budgets: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::Transition;

    /// Two-trajectory table built by hand.
    fn two(p: [f64; 2], r: [f64; 2], c: [f64; 2]) -> TrajectoryTable {
        let env = TabularCmdp {
            name: "two".into(),
            n_states: 1,
            n_actions: 2,
            initial: vec![1.0],
            transitions: vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            reward: r.to_vec(),
            cost: c.to_vec(),
            gamma: 1.0,
            max_len: 1,
        };
        let counts = Counts {
            n_states: 1,
            n_actions: 2,
            sa: vec![p[0] * 100.0, p[1] * 100.0],
            sas: vec![p[0] * 100.0, p[1] * 100.0],
            initial: vec![1.0],
            cost_sum: vec![c[0] * p[0] * 100.0, c[1] * p[1] * 100.0],
        };
        enumerate_counts(&env, counts).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let t = two([0.5, 0.5], [1.0, 0.0], [0.0, 2.0]);
        let q = optimal_q(&t, 1.0, 1.0).unwrap();
        assert_eq!(q.q, vec![1.0, 0.0]);

        let t = two([0.5, 0.5], [1.0, 0.0], [0.0, 0.0]);
        let q = optimal_q(&t, 1.0, 2f64.ln()).unwrap();
        assert!((q.q[0] - 2.0 / 3.0).abs() < 1e-12 && (q.q[1] - 1.0 / 3.0).abs() < 1e-12);

        let t = two([0.3, 0.7], [1.0, 5.0], [0.0, 0.5]);
        let q = optimal_q(&t, 1.0, 0.0).unwrap();
        assert!((q.q[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn infeasible_budget_is_an_error() {
        let t = two([0.5, 0.5], [1.0, 0.0], [3.0, 2.0]);
        assert!(matches!(optimal_q(&t, 1.0, 1.0), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn feasibility_examples() {
        let t = two([0.5, 0.5], [0.0, 0.0], [0.0, 0.0]);
        assert!(feasibility(&t, 1.0, 0.0));
        let t = two([0.5, 0.5], [0.0, 0.0], [0.0, 2.0]);
        assert!(feasibility(&t, 1.0, 2f64.ln()));
        let t = two([0.3, 0.7], [0.0, 0.0], [0.0, 2.0]);
        assert!(!feasibility(&t, 1.0, 1.0));
    }

    #[test]
    fn smoothed_limit_and_n_zero() {
        let t = two([0.5, 0.5], [0.0, 1.0], [0.0, 2.0]);
        let free = smoothed_q(&t, 1.0, 1.0, 0.0);
        let e = std::f64::consts::E;
        assert!((free.q[1] - e / (1.0 + e)).abs() < 1e-12);
        let mut prev = 1.0;
        for n in [0.0, 1.0, 10.0, 100.0, 1e3, 1e4] {
            let m = t.unsafe_mass(&smoothed_q(&t, 1.0, 1.0, n).q, 1.0);
            assert!(m <= prev);
            prev = m;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn deterministic_behavior_gives_single_trajectory() {
        let env = crate::cmdp::GridBudget::default().tabular();
        let mut s = 0;
        let mut ep = Vec::new();
        for t in 0..env.max_len {
            let a = crate::cmdp::GridBudget::greedy_action(s);
            let s2 = crate::cmdp::GridBudget::intended(s, a);
            ep.push(Transition {
                s: vec![s as f64],
                a: vec![a as f64],
                s_next: vec![s2 as f64],
                r: env.reward[env.pair(s, a)],
                c: env.cost[env.pair(s, a)],
                done: t + 1 == env.max_len,
            });
            s = s2;
        }
        let ds = Dataset::new(
            &crate::cmdp::Environment::GridBudget(Default::default()),
            "greedy".into(),
            vec![ep.clone(), ep],
        );
        let table = enumerate(&env, &ds).unwrap();
        assert_eq!(table.entries.len(), 1);
        assert!((table.entries[0].p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_action_chain() {
        let env = TabularCmdp {
            name: "chain".into(),
            n_states: 1,
            n_actions: 2,
            initial: vec![1.0],
            transitions: vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            reward: vec![0.0, 1.0],
            cost: vec![0.0, 0.0],
            gamma: 1.0,
            max_len: 2,
        };
        let counts = Counts {
            n_states: 1,
            n_actions: 2,
            sa: vec![10.0, 10.0],
            sas: vec![10.0, 10.0],
            initial: vec![5.0],
            cost_sum: vec![0.0, 0.0],
        };
        let t = enumerate_counts(&env, counts).unwrap();
        assert_eq!(t.entries.len(), 4);
        assert!(t.entries.iter().all(|e| (e.p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cost_gap_closed_form() {
        let counts = Counts {
            n_states: 1,
            n_actions: 1,
            sa: vec![25.0],
            sas: vec![25.0],
            initial: vec![1.0],
            cost_sum: vec![0.0],
        };
        let l = 4;
        let b = cost_gap_bound(&counts, 1.0, &vec![0; l + 1], &vec![0; l + 1], 0.7).unwrap();
        assert!((b - (l + 1) as f64 * 0.7 / 5.0).abs() < 1e-12);
        let zero = Counts { sa: vec![0.0], ..counts };
        assert!(matches!(cost_gap_bound(&zero, 1.0, &[0], &[0], 1.0), Err(Error::UndefinedBound { .. })));
    }

    #[test]
    fn normal_quantile() {
        assert!((c_c_from_noise(1.0, 0.05) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn bound_inputs_validation() {
        assert!(BoundInputs { c_t: 1.0, c_c: 1.0, delta: 0.05 }.validate().is_ok());
        assert!(BoundInputs { c_t: 1.0, c_c: 1.0, delta: 1.0 }.validate().is_err());
        assert!(BoundInputs { c_t: -1.0, c_c: 1.0, delta: 0.5 }.validate().is_err());
    }
}
