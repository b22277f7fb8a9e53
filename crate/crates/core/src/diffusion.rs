//! Denoising diffusion over flattened fixed-horizon trajectories.
//!
//! Steps are numbered `1..=N` with `i = N` the pure-noise end. The denoiser
//! predicts the injected noise; the reverse mean is recovered through the
//! Gaussian posterior `q(tau^{i-1} | tau^i, tau^0)` with a fixed variance.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, OptimizerState};
use crate::rng::StreamRng;
use crate::trajectory::Trajectory;

/// Precomputed constants of a cosine variance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `betas[i - 1]` is the variance added at step `i`.
    pub betas: Vec<f64>,
    /// `alphas_cumprod[i]` for `i = 0..=N`, with `alphas_cumprod[0] = 1`.
    pub alphas_cumprod: Vec<f64>,
    /// Reverse variance `Sigma^i`, indexed like `betas`.
    pub posterior_variance: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "need at least one diffusion step");
        let offset = 0.008;
        let f = |t: f64| (((t / steps as f64) + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(steps);
        for i in 1..=steps {
            let beta = 1.0 - (f(i as f64) / f0) / (f((i - 1) as f64) / f0);
            betas.push(beta.clamp(1e-6, 0.999));
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let steps = betas.len();
        let mut alphas_cumprod = Vec::with_capacity(steps + 1);
        alphas_cumprod.push(1.0);
        for b in &betas {
            let prev = *alphas_cumprod.last().expect("nonempty");
            alphas_cumprod.push(prev * (1.0 - b));
        }
        let mut posterior_variance = Vec::with_capacity(steps);
        let mut posterior_coef_x0 = Vec::with_capacity(steps);
        let mut posterior_coef_xt = Vec::with_capacity(steps);
        for i in 1..=steps {
            let beta = betas[i - 1];
            let (ab, ab_prev) = (alphas_cumprod[i], alphas_cumprod[i - 1]);
            posterior_variance.push(beta * (1.0 - ab_prev) / (1.0 - ab));
            posterior_coef_x0.push(beta * ab_prev.sqrt() / (1.0 - ab));
            posterior_coef_xt.push((1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab));
        }
        NoiseSchedule {
            steps,
            betas,
            alphas_cumprod,
            posterior_variance,
            posterior_coef_x0,
            posterior_coef_xt,
        }
    }

    fn check(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.steps {
            return Err(Error::StepOutOfRange {
                step: i,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_i)`; `i = 0` gives 1.
    pub fn signal_coef(&self, i: usize) -> f64 {
        self.alphas_cumprod[i].sqrt()
    }

    /// `sqrt(1 - alpha_bar_i)`; `i = 0` gives 0.
    pub fn noise_coef(&self, i: usize) -> f64 {
        (1.0 - self.alphas_cumprod[i]).sqrt()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.posterior_variance[i - 1]
    }
}

/// Cosine learning-rate decay from `lr` down to `lr / 10`.
pub(crate) fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Sinusoidal features of the diffusion step.
pub fn step_embedding(i: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scale = if half > 1 { (10_000f64).ln() / (half - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        out.push((i as f64 * (-(k as f64) * scale).exp()).sin());
    }
    for k in 0..half {
        out.push((i as f64 * (-(k as f64) * scale).exp()).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// `tau_i = signal_coef(i) tau_0 + noise_coef(i) eps` for `1 <= i <= N`.
pub fn add_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    tau0: &Trajectory,
    i: usize,
    rng: &mut R,
) -> Result<(Trajectory, Vec<f64>)> {
    schedule.check(i)?;
    Ok(noised(schedule, tau0, i, rng))
}

/// Like [`add_noise`] but also accepts `i = 0` (returns the clean input).
pub(crate) fn noised<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    tau0: &Trajectory,
    i: usize,
    rng: &mut R,
) -> (Trajectory, Vec<f64>) {
    let (a, b) = (schedule.signal_coef(i), schedule.noise_coef(i));
    let noise: Vec<f64> = (0..tau0.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = tau0.clone();
    for (x, e) in out.as_mut_slice().iter_mut().zip(&noise) {
        *x = a * *x + b * e;
    }
    (out, noise)
}

/// Overwrites the first state block with `s` (already normalized).
pub fn condition_first_state(tau: &mut Trajectory, s: &[f64]) -> Result<()> {
    if s.len() != tau.state_dim {
        return Err(Error::Shape {
            expected: tau.state_dim,
            got: s.len(),
            context: "conditioning state",
        });
    }
    tau.state_mut(0).copy_from_slice(s);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Feed the clean first state during training, as at sampling time.
    pub condition_first_state: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 4000,
            batch_size: 64,
            learning_rate: 1e-3,
            condition_first_state: true,
        }
    }
}

/// Noise-prediction network plus its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: Mlp,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    /// Clamp the implied clean trajectory to the normalized box.
    pub clip_denoised: bool,
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        steps: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let embed_dim = 16;
        let dim = horizon * (state_dim + action_dim);
        let mut sizes = vec![dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        DiffusionModel {
            schedule: NoiseSchedule::cosine(steps),
            denoiser: Mlp::new(&sizes, activation, rng),
            horizon,
            state_dim,
            action_dim,
            embed_dim,
            clip_denoised: true,
        }
    }

    pub fn traj_dim(&self) -> usize {
        self.horizon * (self.state_dim + self.action_dim)
    }

    fn check_traj(&self, t: &Trajectory) -> Result<()> {
        if t.dim() != self.traj_dim() || t.state_dim != self.state_dim {
            return Err(Error::Shape {
                expected: self.traj_dim(),
                got: t.dim(),
                context: "diffusion trajectory",
            });
        }
        Ok(())
    }

    fn with_embedding(&self, x: ArrayView2<'_, f64>, i: usize) -> Array2<f64> {
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

    pub fn predict_noise(&self, x: ArrayView2<'_, f64>, i: usize) -> Result<Array2<f64>> {
        self.denoiser.forward_batch(self.with_embedding(x, i).view())
    }

    /// Reverse-process mean `mu_theta(tau^i, i)` for every row of `x`.
    pub fn reverse_mean(&self, x: ArrayView2<'_, f64>, i: usize) -> Result<Array2<f64>> {
        self.schedule.check(i)?;
        let eps = self.predict_noise(x, i)?;
        let ab = self.schedule.alphas_cumprod[i];
        let (c0, ct) = (self.schedule.posterior_coef_x0[i - 1], self.schedule.posterior_coef_xt[i - 1]);
        let (inv_sqrt_ab, noise_scale) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
        let clip = self.clip_denoised;
        let mut mean = x.to_owned();
        ndarray::Zip::from(&mut mean).and(&eps).for_each(|m, &e| {
            let xt = *m;
            let mut x0 = (xt - noise_scale * e) * inv_sqrt_ab;
            if clip {
                x0 = x0.clamp(-1.0, 1.0);
            }
            *m = c0 * x0 + ct * xt;
        });
        Ok(mean)
    }

    /// One reverse step for a batch of rows in place:
    /// `x <- mu + Sigma^i g + sqrt(Sigma^i) z`, with `z` drawn from the
    /// row's own stream and suppressed at `i = 1`.
    pub fn reverse_step_batch(
        &self,
        x: &mut Array2<f64>,
        i: usize,
        guidance: Option<&Array2<f64>>,
        rngs: &mut [StreamRng],
    ) -> Result<()> {
        if rngs.len() != x.nrows() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: rngs.len(),
                context: "per-row rng streams",
            });
        }
        if let Some(g) = guidance {
            if g.dim() != x.dim() {
                return Err(Error::Shape {
                    expected: x.ncols(),
                    got: g.ncols(),
                    context: "guidance gradient",
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Guidance("non-finite guidance gradient".into()));
            }
        }
        let mut mean = self.reverse_mean(x.view(), i)?;
        let sigma = self.schedule.sigma(i);
        if let Some(g) = guidance {
            mean.scaled_add(sigma, g);
        }
        if i > 1 {
            let std = sigma.sqrt();
            for (mut row, rng) in mean.rows_mut().into_iter().zip(rngs.iter_mut()) {
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += std * z;
                }
            }
        }
        *x = mean;
        Ok(())
    }

    /// Single-trajectory reverse step.
    pub fn reverse_step(
        &self,
        tau_i: &Trajectory,
        i: usize,
        guidance: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Trajectory> {
        self.check_traj(tau_i)?;
        let dim = self.traj_dim();
        let mut x = Array2::from_shape_vec((1, dim), tau_i.as_slice().to_vec()).expect("dim checked");
        let g = match guidance {
            Some(g) => Some(Array2::from_shape_vec((1, dim), g.to_vec()).map_err(|_| Error::Shape {
                expected: dim,
                got: g.len(),
                context: "guidance gradient",
            })?),
            None => None,
        };
        self.reverse_step_batch(&mut x, i, g.as_ref(), std::slice::from_mut(rng))?;
        Trajectory::new(self.horizon, self.state_dim, self.action_dim, x.into_raw_vec_and_offset().0)
    }

    /// Unguided ancestral sampling, one stream per sample. `first_state`
    /// (normalized) is re-imposed after every step when given.
    pub fn sample(&self, first_states: &[Option<Vec<f64>>], rngs: &mut [StreamRng]) -> Result<Vec<Trajectory>> {
        let n = first_states.len();
        let dim = self.traj_dim();
        let mut x = Array2::zeros((n, dim));
        for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let condition = |x: &mut Array2<f64>| {
            for (mut row, s) in x.rows_mut().into_iter().zip(first_states) {
                if let Some(s) = s {
                    for (k, v) in s.iter().enumerate() {
                        row[k] = *v;
                    }
                }
            }
        };
        condition(&mut x);
        for i in (1..=self.schedule.steps).rev() {
            self.reverse_step_batch(&mut x, i, None, rngs)?;
            condition(&mut x);
        }
        x.rows()
            .into_iter()
            .map(|r| Trajectory::new(self.horizon, self.state_dim, self.action_dim, r.to_vec()))
            .collect()
    }

    /// Trains the denoiser on normalized trajectories with the
    /// noise-prediction objective. Returns the per-step loss curve.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &[Trajectory],
        cfg: &DiffusionTrainConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyInput("diffusion training windows"));
        }
        for t in data {
            self.check_traj(t)?;
        }
        let dim = self.traj_dim();
        let sd = self.state_dim;
        let mut opt = OptimizerState::adam(&self.denoiser, cfg.learning_rate);
        let mut curve = Vec::with_capacity(cfg.steps);
        let b = cfg.batch_size.max(1);
        let mut inputs = Array2::zeros((b, dim + self.embed_dim));
        let mut targets = Array2::zeros((b, dim));
        for step in 0..cfg.steps {
            opt.lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
            for r in 0..b {
                let tau0 = &data[rng.random_range(0..data.len())];
                let i = rng.random_range(1..=self.schedule.steps);
                let (mut noisy, noise) = noised(&self.schedule, tau0, i, rng);
                if cfg.condition_first_state {
                    noisy.state_mut(0).copy_from_slice(tau0.state(0));
                }
                let emb = step_embedding(i, self.embed_dim);
                let mut row = inputs.row_mut(r);
                for (k, v) in noisy.as_slice().iter().chain(&emb).enumerate() {
                    row[k] = *v;
                }
                targets.row_mut(r).assign(&ndarray::ArrayView1::from(&noise));
            }
            let tape = self.denoiser.forward_tape(inputs.view())?;
            let mut diff = tape.output() - &targets;
            if cfg.condition_first_state {
                diff.slice_mut(s![.., ..sd]).fill(0.0);
            }
            let counted = (b * (dim - if cfg.condition_first_state { sd } else { 0 })).max(1) as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / counted;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { step, loss });
            }
            curve.push(loss);
            diff *= 2.0 / counted;
            let (grads, _) = self.denoiser.backward(&tape, diff.view());
            self.denoiser.apply_gradients(&mut opt, &grads)?;
        }
        Ok(curve)
    }

    /// Mean noise-prediction loss on `data` at uniformly drawn steps,
    /// without updating anything.
    pub fn evaluate_loss<R: Rng + ?Sized>(&self, data: &[Trajectory], draws: usize, condition: bool, rng: &mut R) -> Result<f64> {
        let sd = self.state_dim;
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..draws {
            let tau0 = &data[rng.random_range(0..data.len())];
            let i = rng.random_range(1..=self.schedule.steps);
            let (mut noisy, noise) = noised(&self.schedule, tau0, i, rng);
            if condition {
                noisy.state_mut(0).copy_from_slice(tau0.state(0));
            }
            let x = ArrayView2::from_shape((1, noisy.dim()), noisy.as_slice()).expect("contiguous");
            let eps = self.predict_noise(x, i)?;
            let skip = if condition { sd } else { 0 };
            for (k, (p, e)) in eps.iter().zip(&noise).enumerate() {
                if k >= skip {
                    total += (p - e) * (p - e);
                    count += 1;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::SeedableRng;

    fn model(horizon: usize, sd: usize, ad: usize, steps: usize, seed: u64) -> DiffusionModel {
        let mut rng = StreamRng::seed_from_u64(seed);
        DiffusionModel::new(horizon, sd, ad, steps, &[64, 64], Activation::Silu, &mut rng)
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::cosine(64);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas_cumprod[64] < 1e-3);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn first_step_is_near_identity() {
        let s = NoiseSchedule::cosine(64);
        let mut rng = StreamRng::seed_from_u64(0);
        let tau0 = Trajectory::new(2, 1, 1, vec![0.5, -0.3, 0.9, 0.1]).unwrap();
        let (tau1, _) = add_noise(&s, &tau0, 1, &mut rng).unwrap();
        let tol = s.noise_coef(1) * 4.0 + (1.0 - s.signal_coef(1));
        for (a, b) in tau1.as_slice().iter().zip(tau0.as_slice()) {
            assert!((a - b).abs() < tol);
        }
    }

    #[test]
    fn terminal_step_matches_standard_normal() {
        let s = NoiseSchedule::cosine(64);
        let mut rng = StreamRng::seed_from_u64(1);
        let tau0 = Trajectory::new(1, 1, 1, vec![0.9, -0.9]).unwrap();
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| add_noise(&s, &tau0, 64, &mut rng).unwrap().0.as_slice()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 3 sigma: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n).
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn add_noise_rejects_bad_steps_and_is_reproducible() {
        let s = NoiseSchedule::cosine(8);
        let tau0 = Trajectory::zeros(2, 1, 1);
        let mut rng = StreamRng::seed_from_u64(3);
        assert!(add_noise(&s, &tau0, 0, &mut rng).is_err());
        assert!(add_noise(&s, &tau0, 9, &mut rng).is_err());
        let a = add_noise(&s, &tau0, 4, &mut StreamRng::seed_from_u64(5)).unwrap();
        let b = add_noise(&s, &tau0, 4, &mut StreamRng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_guidance_equals_unguided_step() {
        let m = model(3, 2, 1, 10, 0);
        let tau = Trajectory::new(3, 2, 1, vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.5, -0.5, 0.9, 0.3]).unwrap();
        let a = m.reverse_step(&tau, 5, None, &mut stream(1, &[])).unwrap();
        let b = m.reverse_step(&tau, 5, Some(&[0.0; 9]), &mut stream(1, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_guidance_shifts_mean_by_sigma_k() {
        let m = model(2, 1, 1, 10, 1);
        let tau = Trajectory::new(2, 1, 1, vec![0.3, -0.2, 0.1, 0.7]).unwrap();
        let k = 0.37;
        for i in [2, 7, 10] {
            let plain = m.reverse_step(&tau, i, None, &mut stream(2, &[i as u64])).unwrap();
            let shifted = m.reverse_step(&tau, i, Some(&[k; 4]), &mut stream(2, &[i as u64])).unwrap();
            let sigma = m.schedule.sigma(i);
            for (a, b) in shifted.as_slice().iter().zip(plain.as_slice()) {
                assert!((a - b - sigma * k).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_guidance_is_rejected() {
        let m = model(2, 1, 1, 4, 2);
        let tau = Trajectory::zeros(2, 1, 1);
        let err = m.reverse_step(&tau, 2, Some(&[f64::NAN, 0.0, 0.0, 0.0]), &mut stream(0, &[]));
        assert!(matches!(err, Err(Error::Guidance(_))));
    }

    #[test]
    fn full_chain_is_bitwise_reproducible() {
        let m = model(4, 2, 2, 16, 3);
        let run = || {
            let mut rngs = vec![stream(9, &[0]), stream(9, &[1])];
            m.sample(&[Some(vec![0.1, -0.1]), None], &mut rngs).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a[0].state(0), &[0.1, -0.1]);
    }

    #[test]
    fn conditioning_touches_only_first_state() {
        let mut tau = Trajectory::new(3, 2, 1, (0..9).map(f64::from).collect()).unwrap();
        let before = tau.clone();
        condition_first_state(&mut tau, &[-1.0, -2.0]).unwrap();
        assert_eq!(tau.state(0), &[-1.0, -2.0]);
        assert_eq!(&tau.as_slice()[2..], &before.as_slice()[2..]);
        let once = tau.clone();
        condition_first_state(&mut tau, &[-1.0, -2.0]).unwrap();
        assert_eq!(tau, once);
        assert!(condition_first_state(&mut tau, &[1.0]).is_err());
    }

    #[test]
    fn untrained_loss_is_unit_noise_baseline() {
        let mut m = model(4, 2, 2, 32, 4);
        // A zero output layer predicts no noise, so the loss is E[eps^2] = 1.
        let last = m.denoiser.layers().len() - 1;
        m.denoiser.layers_mut()[last].weight.fill(0.0);
        let data = vec![Trajectory::new(4, 2, 2, vec![0.2; 16]).unwrap()];
        let loss = m.evaluate_loss(&data, 500, true, &mut StreamRng::seed_from_u64(0)).unwrap();
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    #[test]
    fn single_trajectory_dataset_is_recovered() {
        let target: Vec<f64> = vec![0.5, -0.5, 0.2, 0.8, -0.3, 0.1, 0.0, -0.7, 0.6, 0.4, -0.2, 0.9];
        let tau = Trajectory::new(4, 2, 1, target.clone()).unwrap();
        let mut m = model(4, 2, 1, 32, 5);
        let cfg = DiffusionTrainConfig {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            condition_first_state: false,
        };
        m.train(&[tau], &cfg, &mut StreamRng::seed_from_u64(6)).unwrap();
        let mut rngs: Vec<StreamRng> = (0..50).map(|k| stream(7, &[k])).collect();
        let samples = m.sample(&vec![None; 50], &mut rngs).unwrap();
        let mut dev = 0.0;
        for s in &samples {
            dev += s.as_slice().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.len() as f64;
        }
        dev /= samples.len() as f64;
        assert!(dev < 0.1, "mean deviation {dev}");
    }

    #[test]
    fn two_clusters_are_both_recovered() {
        // Same first state, opposite continuations.
        let up = Trajectory::new(3, 1, 1, vec![0.0, 0.5, 0.5, 0.5, 0.8, 0.5]).unwrap();
        let down = Trajectory::new(3, 1, 1, vec![0.0, -0.5, -0.5, -0.5, -0.8, -0.5]).unwrap();
        let mut m = model(3, 1, 1, 32, 8);
        let cfg = DiffusionTrainConfig {
            steps: 3000,
            batch_size: 32,
            ..Default::default()
        };
        m.train(&[up.clone(), down.clone()], &cfg, &mut StreamRng::seed_from_u64(9)).unwrap();
        let n = 100;
        let mut rngs: Vec<StreamRng> = (0..n).map(|k| stream(10, &[k])).collect();
        let samples = m.sample(&vec![Some(vec![0.0]); n as usize], &mut rngs).unwrap();
        let dist = |a: &Trajectory, b: &Trajectory| {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        let n_up = samples.iter().filter(|s| dist(s, &up) < dist(s, &down)).count();
        assert!(n_up > 0 && n_up < n as usize, "{n_up} of {n} near the upper cluster");
    }

    #[test]
    fn unguided_sampling_preserves_moments() {
        // Single-mode synthetic data: a noisy ramp.
        let mut rng = StreamRng::seed_from_u64(11);
        let data: Vec<Trajectory> = (0..400)
            .map(|_| {
                let shift: f64 = rng.random_range(-0.3..0.3);
                let v: Vec<f64> = (0..6).map(|k| (-0.5 + 0.2 * k as f64 + shift).clamp(-1.0, 1.0)).collect();
                Trajectory::new(3, 1, 1, v).unwrap()
            })
            .collect();
        let mut m = model(3, 1, 1, 32, 12);
        let cfg = DiffusionTrainConfig {
            steps: 4000,
            batch_size: 64,
            condition_first_state: false,
            ..Default::default()
        };
        m.train(&data, &cfg, &mut rng).unwrap();
        let n = 1000;
        let mut rngs: Vec<StreamRng> = (0..n).map(|k| stream(13, &[k])).collect();
        let samples = m.sample(&vec![None; n as usize], &mut rngs).unwrap();
        let moments = |xs: &[Trajectory], d: usize| {
            let vals: Vec<f64> = xs.iter().map(|t| t.as_slice()[d]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt())
        };
        for d in 0..6 {
            let (dm, ds) = moments(&data, d);
            let (sm, ss) = moments(&samples, d);
            assert!((sm - dm).abs() <= 0.15 * ds, "coord {d}: mean {sm} vs {dm}");
            assert!((ss - ds).abs() <= 0.15 * ds, "coord {d}: std {ss} vs {ds}");
        }
    }
}
