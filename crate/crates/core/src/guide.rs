//! Reward and cost estimators over noised trajectories and the
//! budget-conditioned guidance gradient.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cosine_lr, noised, step_embedding, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, OptimizerState};
use crate::trajectory::Trajectory;

/// Guidance scale `alpha` and violation penalty `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideConfig {
    pub alpha: f64,
    pub n: f64,
}

impl Default for GuideConfig {
    fn default() -> Self {
        GuideConfig { alpha: 0.1, n: 100.0 }
    }
}

impl GuideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.n >= 0.0 && self.n.is_finite()) {
            return Err(Error::Config(format!("n must be non-negative, got {}", self.n)));
        }
        Ok(())
    }
}

/// `R - n * 1[C > b] * (C - b)`; `C = b` counts as safe.
pub fn smoothed_objective(reward: f64, cost: f64, cfg: &GuideConfig, budget: f64) -> f64 {
    if cost > budget {
        reward - cfg.n * (cost - budget)
    } else {
        reward
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub condition_first_state: bool,
}

impl Default for GuideTrainConfig {
    fn default() -> Self {
        GuideTrainConfig {
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            condition_first_state: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuideLosses {
    /// Per-step MSE in standardized units.
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
}

/// Guidance for a batch of noised candidates.
#[derive(Debug, Clone)]
pub struct GuidanceBatch {
    pub grad: Array2<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    /// Rows that took the penalized branch.
    pub unsafe_branch: Vec<bool>,
}

fn softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp().ln_1p()
    }
}

fn sigmoid(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

/// Reward head (affine output) and cost head (`scale * softplus`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidePair {
    pub reward_head: Mlp,
    pub cost_head: Mlp,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub reward_shift: f64,
    pub reward_scale: f64,
    pub cost_scale: f64,
}

impl GuidePair {
    pub fn new<R: Rng + ?Sized>(
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let embed_dim = 16;
        let dim = horizon * (state_dim + action_dim);
        let mut sizes = vec![dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        GuidePair {
            reward_head: Mlp::new(&sizes, activation, rng),
            cost_head: Mlp::new(&sizes, activation, rng),
            horizon,
            state_dim,
            action_dim,
            embed_dim,
            reward_shift: 0.0,
            reward_scale: 1.0,
            cost_scale: 1.0,
        }
    }

    pub fn traj_dim(&self) -> usize {
        self.horizon * (self.state_dim + self.action_dim)
    }

    fn check_cols(&self, got: usize) -> Result<()> {
        if got != self.traj_dim() {
            return Err(Error::Shape {
                expected: self.traj_dim(),
                got,
                context: "guide input trajectory",
            });
        }
        Ok(())
    }

    fn inputs(&self, x: ArrayView2<'_, f64>, i: usize) -> Array2<f64> {
        let dim = self.traj_dim();
        let emb = step_embedding(i, self.embed_dim);
        let mut input = Array2::zeros((x.nrows(), dim + self.embed_dim));
        input.slice_mut(s![.., ..dim]).assign(&x);
        for mut row in input.rows_mut() {
            for (k, v) in emb.iter().enumerate() {
                row[dim + k] = *v;
            }
        }
        input
    }

    /// `(R_hat, C_hat)` for every row of `x` at diffusion step `i`.
    pub fn predict(&self, x: ArrayView2<'_, f64>, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_cols(x.ncols())?;
        let input = self.inputs(x, i);
        let r = self.reward_head.forward_batch(input.view())?;
        let c = self.cost_head.forward_batch(input.view())?;
        Ok((
            r.iter().map(|y| self.reward_shift + self.reward_scale * y).collect(),
            c.iter().map(|&y| self.cost_scale * softplus(y)).collect(),
        ))
    }

    pub fn estimate(&self, tau: &Trajectory, i: usize) -> Result<(f64, f64)> {
        let x = ArrayView2::from_shape((1, tau.dim()), tau.as_slice()).expect("contiguous");
        let (r, c) = self.predict(x, i)?;
        Ok((r[0], c[0]))
    }

    /// `g_b = alpha * grad R_hat` on rows with `C_hat <= budget`, otherwise
    /// `alpha * (grad R_hat - n * grad C_hat)`.
    pub fn guidance_batch(
        &self,
        x: ArrayView2<'_, f64>,
        i: usize,
        cfg: &GuideConfig,
        budget: f64,
    ) -> Result<GuidanceBatch> {
        self.check_cols(x.ncols())?;
        let dim = self.traj_dim();
        let rows = x.nrows();
        let input = self.inputs(x, i);

        let r_tape = self.reward_head.forward_tape(input.view())?;
        let r_cot = Array2::from_elem((rows, 1), self.reward_scale);
        let r_grad = self.reward_head.backward_input(&r_tape, r_cot.view());
        let reward: Vec<f64> = r_tape.output().iter().map(|y| self.reward_shift + self.reward_scale * y).collect();

        let c_tape = self.cost_head.forward_tape(input.view())?;
        let c_raw: Vec<f64> = c_tape.output().iter().copied().collect();
        let cost: Vec<f64> = c_raw.iter().map(|&y| self.cost_scale * softplus(y)).collect();
        let unsafe_branch: Vec<bool> = cost.iter().map(|&c| c > budget).collect();

        let mut grad = r_grad.slice(s![.., ..dim]).to_owned();
        if unsafe_branch.iter().any(|&u| u) {
            // Zero cotangent on safe rows keeps their gradient untouched.
            let c_cot = Array2::from_shape_fn((rows, 1), |(r, _)| {
                if unsafe_branch[r] {
                    self.cost_scale * sigmoid(c_raw[r])
                } else {
                    0.0
                }
            });
            let c_grad = self.cost_head.backward_input(&c_tape, c_cot.view());
            grad.scaled_add(-cfg.n, &c_grad.slice(s![.., ..dim]));
        }
        grad *= cfg.alpha;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Guidance(format!("non-finite guidance gradient at step {i}")));
        }
        Ok(GuidanceBatch {
            grad,
            reward,
            cost,
            unsafe_branch,
        })
    }

    pub fn guidance_gradient(&self, tau_i: &Trajectory, i: usize, cfg: &GuideConfig, budget: f64) -> Result<Vec<f64>> {
        self.check_cols(tau_i.dim())?;
        let x = ArrayView2::from_shape((1, tau_i.dim()), tau_i.as_slice()).expect("contiguous");
        let out = self.guidance_batch(x, i, cfg, budget)?;
        Ok(out.grad.into_raw_vec_and_offset().0)
    }

    /// Regresses reward-to-go and cost-to-go of the clean window from its
    /// noised version at a uniformly drawn step `i` in `0..=N`.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        trajs: &[Trajectory],
        reward_to_go: &[f64],
        cost_to_go: &[f64],
        schedule: &NoiseSchedule,
        cfg: &GuideTrainConfig,
        rng: &mut R,
    ) -> Result<GuideLosses> {
        if trajs.is_empty() {
            return Err(Error::EmptyInput("guide training windows"));
        }
        if reward_to_go.len() != trajs.len() || cost_to_go.len() != trajs.len() {
            return Err(Error::Shape {
                expected: trajs.len(),
                got: reward_to_go.len().min(cost_to_go.len()),
                context: "guide labels",
            });
        }
        for t in trajs {
            self.check_cols(t.dim())?;
        }
        let (mean, std) = mean_std(reward_to_go);
        self.reward_shift = mean;
        self.reward_scale = if std > 1e-8 { std } else { 1.0 };
        let (_, cost_std) = mean_std(cost_to_go);
        self.cost_scale = if cost_std > 1e-8 { cost_std } else { 0.01 };

        let dim = self.traj_dim();
        let b = cfg.batch_size.max(1);
        let mut r_opt = OptimizerState::adam(&self.reward_head, cfg.learning_rate);
        let mut c_opt = OptimizerState::adam(&self.cost_head, cfg.learning_rate);
        let mut losses = GuideLosses::default();
        let mut inputs = Array2::zeros((b, dim + self.embed_dim));
        let mut r_targets = Array2::zeros((b, 1));
        let mut c_targets = vec![0.0; b];
        for step in 0..cfg.steps {
            let lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
            r_opt.lr = lr;
            c_opt.lr = lr;
            for r in 0..b {
                let k = rng.random_range(0..trajs.len());
                let i = rng.random_range(0..=schedule.steps);
                let (mut noisy, _) = noised(schedule, &trajs[k], i, rng);
                if cfg.condition_first_state {
                    noisy.state_mut(0).copy_from_slice(trajs[k].state(0));
                }
                let emb = step_embedding(i, self.embed_dim);
                let mut row = inputs.row_mut(r);
                for (j, v) in noisy.as_slice().iter().chain(&emb).enumerate() {
                    row[j] = *v;
                }
                r_targets[[r, 0]] = (reward_to_go[k] - self.reward_shift) / self.reward_scale;
                c_targets[r] = cost_to_go[k] / self.cost_scale;
            }
            let r_loss = self.reward_head.train_step(&mut r_opt, inputs.view(), r_targets.view())?;

            let tape = self.cost_head.forward_tape(inputs.view())?;
            let mut d_out = Array2::zeros((b, 1));
            let mut c_loss = 0.0;
            for (r, &y) in tape.output().iter().enumerate() {
                let diff = softplus(y) - c_targets[r];
                c_loss += diff * diff;
                d_out[[r, 0]] = 2.0 * diff * sigmoid(y) / b as f64;
            }
            c_loss /= b as f64;
            if !c_loss.is_finite() {
                return Err(Error::TrainingDivergence { step, loss: c_loss });
            }
            let (grads, _) = self.cost_head.backward(&tape, d_out.view());
            self.cost_head.apply_gradients(&mut c_opt, &grads)?;
            losses.reward.push(r_loss);
            losses.cost.push(c_loss);
        }
        Ok(losses)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
