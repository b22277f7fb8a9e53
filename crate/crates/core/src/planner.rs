//! Receding-horizon planning with a budget supplied at inference time.
//!
//! Each plan samples `K` candidates through the guided reverse chain with the
//! current state imposed on the first state block, then keeps the highest
//! estimated reward among candidates whose estimated cost fits the remaining
//! budget. The remaining budget follows `z_{t+1} = (z_t - c_t) / gamma`.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifacts::Artifacts;
use crate::cmdp::Environment;
use crate::error::{Error, Result};
use crate::guide::GuideConfig;
use crate::rng::StreamRng;
use crate::trajectory::Trajectory;

/// Scaled remaining budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetTracker {
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    pub gamma: f64,
    #[serde(with = "crate::io::unbounded")]
    pub z: f64,
    pub t: usize,
}

impl BudgetTracker {
    pub fn new(budget: f64, gamma: f64) -> Self {
        BudgetTracker {
            budget,
            gamma,
            z: budget,
            t: 0,
        }
    }

    /// Applies `z <- (z - c) / gamma`. `z` may become negative.
    pub fn update(&mut self, cost: f64) {
        debug_assert!(cost >= 0.0, "costs are non-negative");
        self.z = (self.z - cost) / self.gamma;
        self.t += 1;
    }

    /// `gamma^t * z_t`, the unscaled budget left.
    pub fn unscaled(&self) -> f64 {
        self.gamma.powi(self.t as i32) * self.z
    }
}

/// How a plan guides and selects its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Reward guidance with the budget penalty and safe-best selection.
    Budgeted,
    /// Budgeted with `z = +inf`: reward-only guidance and ranking.
    UnconstrainedGuided,
    /// No guidance; a uniformly drawn candidate.
    BehaviorSample,
}

impl PlanMode {
    pub fn tag(&self) -> &'static str {
        match self {
            PlanMode::Budgeted => "trebi",
            PlanMode::UnconstrainedGuided => "unconstrained-guided",
            PlanMode::BehaviorSample => "behavior-sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub candidates: usize,
    pub replan_interval: usize,
    pub guide: GuideConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            candidates: 16,
            replan_interval: 1,
            guide: GuideConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        if self.replan_interval == 0 || self.replan_interval > horizon {
            return Err(Error::Config(format!(
                "replan_interval must lie in 1..={horizon} (the model horizon), got {}",
                self.replan_interval
            )));
        }
        self.guide.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Chosen candidate in raw feature units.
    pub trajectory: Trajectory,
    pub chosen: usize,
    pub candidates: Vec<CandidateStats>,
    /// No candidate had `C_hat <= z`; the min-`C_hat` one was taken.
    pub fallback: bool,
    /// Fraction of (step, candidate) pairs on the penalized guidance branch.
    pub unsafe_branch_rate: f64,
    /// Same fraction at the last reverse step only.
    pub unsafe_branch_final: f64,
}

impl Plan {
    pub fn stats(&self) -> CandidateStats {
        self.candidates[self.chosen]
    }
}

/// Index of the max-`R_hat` candidate with `C_hat <= z`, or of the
/// min-`C_hat` candidate when none qualifies. Returns `(index, fallback)`.
pub fn select_candidate(stats: &[CandidateStats], z: f64) -> (usize, bool) {
    let best_safe = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.cost <= z)
        .fold(None::<(usize, f64)>, |acc, (k, s)| match acc {
            Some((_, r)) if r >= s.reward => acc,
            _ => Some((k, s.reward)),
        });
    match best_safe {
        Some((k, _)) => (k, false),
        None => {
            let k = stats
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (k, s)| if s.cost < acc.1 { (k, s.cost) } else { acc })
                .0;
            (k, true)
        }
    }
}

fn impose_first_state(x: &mut Array2<f64>, s: &[f64]) {
    for mut row in x.rows_mut() {
        for (k, v) in s.iter().enumerate() {
            row[k] = *v;
        }
    }
}

struct Sampled {
    x: Array2<f64>,
    unsafe_steps: usize,
    unsafe_final: usize,
}

fn sample_candidates(
    art: &Artifacts,
    s_norm: &[f64],
    z: f64,
    mode: PlanMode,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
) -> Result<Sampled> {
    let model = &art.diffusion;
    let k = cfg.candidates;
    let mut rngs: Vec<StreamRng> = (0..k).map(|_| StreamRng::seed_from_u64(rng.random())).collect();
    let mut x = Array2::zeros((k, model.traj_dim()));
    for (mut row, r) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = r.sample(StandardNormal);
        }
    }
    impose_first_state(&mut x, s_norm);
    let budget = match mode {
        PlanMode::Budgeted => z,
        _ => f64::INFINITY,
    };
    let (mut unsafe_steps, mut unsafe_final) = (0, 0);
    for i in (1..=model.schedule.steps).rev() {
        let guidance = match mode {
            PlanMode::BehaviorSample => None,
            _ => {
                let g = art.guides.guidance_batch(x.view(), i, &cfg.guide, budget)?;
                let n_unsafe = g.unsafe_branch.iter().filter(|&&u| u).count();
                unsafe_steps += n_unsafe;
                if i == 1 {
                    unsafe_final = n_unsafe;
                }
                Some(g.grad)
            }
        };
        model.reverse_step_batch(&mut x, i, guidance.as_ref(), &mut rngs)?;
        impose_first_state(&mut x, s_norm);
    }
    Ok(Sampled {
        x,
        unsafe_steps,
        unsafe_final,
    })
}

/// Samples `K` candidates from state `s` (raw env coordinates) against
/// remaining budget `z` and returns the selected one, denormalized.
pub fn plan(art: &Artifacts, s: &[f64], z: f64, mode: PlanMode, cfg: &PlannerConfig, rng: &mut StreamRng) -> Result<Plan> {
    cfg.validate(art.diffusion.horizon)?;
    let s_norm = art.normalizer.normalize_state(&art.env.state_features(s));
    let mut sampled = sample_candidates(art, &s_norm, z, mode, cfg, rng)?;
    if sampled.x.iter().any(|v| !v.is_finite()) {
        sampled = sample_candidates(art, &s_norm, z, mode, cfg, rng)?;
        if sampled.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCandidate);
        }
    }
    let (rewards, costs) = art.guides.predict(sampled.x.view(), 0)?;
    let candidates: Vec<CandidateStats> = rewards
        .iter()
        .zip(&costs)
        .map(|(&reward, &cost)| CandidateStats { reward, cost })
        .collect();
    let (chosen, fallback) = match mode {
        PlanMode::Budgeted => select_candidate(&candidates, z),
        PlanMode::UnconstrainedGuided => select_candidate(&candidates, f64::INFINITY),
        PlanMode::BehaviorSample => (rng.random_range(0..candidates.len()), false),
    };
    let model = &art.diffusion;
    let row = sampled.x.row(chosen).to_vec();
    let normalized = Trajectory::new(model.horizon, model.state_dim, model.action_dim, row)?;
    let denom = (cfg.candidates * model.schedule.steps) as f64;
    Ok(Plan {
        trajectory: art.normalizer.denormalize(&normalized),
        chosen,
        candidates,
        fallback,
        unsafe_branch_rate: sampled.unsafe_steps as f64 / denom,
        unsafe_branch_final: sampled.unsafe_final as f64 / cfg.candidates as f64,
    })
}

/// One executed step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    #[serde(with = "crate::io::unbounded")]
    pub z: f64,
    pub replanned: bool,
    pub reward_hat: f64,
    pub cost_hat: f64,
    pub fallback: bool,
    pub unsafe_branch_rate: f64,
    pub action: Vec<f64>,
    pub r: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub mode: PlanMode,
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    /// Discounted return under the true environment.
    pub reward: f64,
    /// Discounted cost under the true environment.
    pub cost: f64,
    pub violation: bool,
    pub fallbacks: usize,
    pub steps: Vec<StepLog>,
}

impl EpisodeResult {
    /// Violation flag against a different budget.
    pub fn violates(&self, budget: f64) -> bool {
        self.cost > budget
    }
}

/// Runs one episode in `env`, executing the plan's actions and replanning
/// every `replan_interval` steps. `budget` is ignored by the baselines
/// except for the violation flag.
pub fn run_episode(
    env: &Environment,
    art: &Artifacts,
    budget: f64,
    mode: PlanMode,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
) -> Result<EpisodeResult> {
    if !(budget > 0.0) {
        return Err(Error::Config(format!("budget must be positive, got {budget}")));
    }
    cfg.validate(art.diffusion.horizon)?;
    let mut env_rng = StreamRng::seed_from_u64(rng.random());
    let mut plan_rng = StreamRng::seed_from_u64(rng.random());
    let gamma = env.gamma();
    let mut tracker = BudgetTracker::new(budget, gamma);
    let mut state = env.reset(&mut env_rng);
    let mut current: Option<(Plan, usize)> = None;
    let (mut reward, mut cost, mut discount) = (0.0, 0.0, 1.0);
    let mut steps = Vec::with_capacity(env.max_len());
    let mut fallbacks = 0;
    while !state.done {
        let t = state.t;
        let replan = match &current {
            None => true,
            Some((_, t0)) => t - t0 >= cfg.replan_interval,
        };
        if replan {
            let p = plan(art, &state.state, tracker.z, mode, cfg, &mut plan_rng)?;
            fallbacks += p.fallback as usize;
            current = Some((p, t));
        }
        let (p, t0) = current.as_ref().expect("planned above");
        let features = p.trajectory.action(t - t0).to_vec();
        let action = env.action_from_features(&features);
        let z = tracker.z;
        let tr = env.step(&mut state, &action, &mut env_rng)?;
        reward += discount * tr.r;
        cost += discount * tr.c;
        discount *= gamma;
        let stats = p.stats();
        steps.push(StepLog {
            t,
            z,
            replanned: replan,
            reward_hat: stats.reward,
            cost_hat: stats.cost,
            fallback: p.fallback,
            unsafe_branch_rate: p.unsafe_branch_rate,
            action,
            r: tr.r,
            c: tr.c,
        });
        tracker.update(tr.c);
    }
    Ok(EpisodeResult {
        mode,
        budget,
        reward,
        cost,
        violation: cost > budget,
        fallbacks,
        steps,
    })
}

/// Largest `|gamma^t z_t - (b - sum_{k<t} gamma^k c_k)|` over a logged episode.
pub fn budget_identity_error(result: &EpisodeResult, gamma: f64) -> f64 {
    let mut spent = 0.0;
    let mut worst: f64 = 0.0;
    for (t, step) in result.steps.iter().enumerate() {
        let lhs = gamma.powi(t as i32) * step.z;
        worst = worst.max((lhs - (result.budget - spent)).abs());
        spent += gamma.powi(t as i32) * step.c;
    }
    worst
}

/// Predicted `(R_hat, C_hat)` of clean trajectories given in raw features.
pub fn score(art: &Artifacts, trajs: &[Trajectory]) -> Result<Vec<CandidateStats>> {
    let dim = art.guides.traj_dim();
    let mut x = Array2::zeros((trajs.len(), dim));
    for (mut row, t) in x.rows_mut().into_iter().zip(trajs) {
        if t.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: t.dim(),
                context: "scored trajectory",
            });
        }
        row.assign(&ArrayView1::from(art.normalizer.normalize(t).as_slice()));
    }
    let (r, c) = art.guides.predict(x.view(), 0)?;
    Ok(r.into_iter().zip(c).map(|(reward, cost)| CandidateStats { reward, cost }).collect())
}
