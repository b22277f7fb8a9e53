//! Trained model bundle: diffusion model, guide pair, normalizer and the
//! calibrated maximum budget, stored as JSON files keyed by the environment
//! hash.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Dataset, Environment};
use crate::diffusion::{DiffusionModel, DiffusionTrainConfig};
use crate::error::{Error, Result};
use crate::guide::{GuidePair, GuideTrainConfig};
use crate::io::{read_json, write_json_atomic};
use crate::nn::Activation;
use crate::rng::{derive_seed, StreamRng};
use crate::trajectory::{make_windows, Normalizer, Trajectory};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
pub const DIFFUSION_FILE: &str = "diffusion.json";
pub const GUIDES_FILE: &str = "guides.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

/// Architecture and optimization settings for both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub denoiser_hidden: Vec<usize>,
    pub guide_hidden: Vec<usize>,
    pub activation: Activation,
    pub diffusion: DiffusionTrainConfig,
    pub guides: GuideTrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            horizon: 12,
            diffusion_steps: 32,
            denoiser_hidden: vec![256, 256],
            guide_hidden: vec![128, 128],
            activation: Activation::Silu,
            diffusion: DiffusionTrainConfig {
                steps: 20_000,
                ..Default::default()
            },
            guides: GuideTrainConfig {
                steps: 10_000,
                ..Default::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be at least 1".into()));
        }
        if self.denoiser_hidden.contains(&0) || self.guide_hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Maximum budget measured from the unconstrained guided planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub env_hash: String,
    pub b_max: f64,
    pub mean_reward: f64,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiffusionFile {
    format_version: u32,
    env_hash: String,
    env: Environment,
    normalizer: Normalizer,
    model: DiffusionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GuidesFile {
    format_version: u32,
    env_hash: String,
    guides: GuidePair,
}

/// Loss curve summaries from one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub windows: usize,
    pub diffusion_loss_first: f64,
    pub diffusion_loss_last: f64,
    pub reward_loss_last: f64,
    pub cost_loss_last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub env: Environment,
    pub normalizer: Normalizer,
    pub diffusion: DiffusionModel,
    pub guides: GuidePair,
    pub calibration: Option<Calibration>,
}

fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let k = xs.len().min(n).max(1);
    xs[xs.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

impl Artifacts {
    pub fn env_hash(&self) -> String {
        self.env.spec_hash()
    }

    /// Fits the normalizer, the diffusion model and the guide pair on all
    /// length-`horizon` windows of `dataset`.
    pub fn train(dataset: &Dataset, cfg: &ModelConfig, seed: u64) -> Result<(Self, TrainingReport)> {
        cfg.validate()?;
        let env = dataset.env().clone();
        let windows = make_windows(dataset, cfg.horizon)?;
        let normalizer = Normalizer::fit(&windows)?;
        let trajs: Vec<Trajectory> = windows.iter().map(|w| normalizer.normalize(&w.traj)).collect();
        let reward_to_go: Vec<f64> = windows.iter().map(|w| w.reward_to_go).collect();
        let cost_to_go: Vec<f64> = windows.iter().map(|w| w.cost_to_go).collect();
        let (sd, ad) = (env.state_feature_dim(), env.action_feature_dim());

        let mut init = StreamRng::seed_from_u64(derive_seed(seed, &[0]));
        let mut diffusion = DiffusionModel::new(
            cfg.horizon,
            sd,
            ad,
            cfg.diffusion_steps,
            &cfg.denoiser_hidden,
            cfg.activation,
            &mut init,
        );
        let mut guides = GuidePair::new(cfg.horizon, sd, ad, &cfg.guide_hidden, cfg.activation, &mut init);

        let mut rng = StreamRng::seed_from_u64(derive_seed(seed, &[1]));
        let curve = diffusion.train(&trajs, &cfg.diffusion, &mut rng)?;
        let mut rng = StreamRng::seed_from_u64(derive_seed(seed, &[2]));
        let losses = guides.train(&trajs, &reward_to_go, &cost_to_go, &diffusion.schedule, &cfg.guides, &mut rng)?;

        let report = TrainingReport {
            windows: windows.len(),
            diffusion_loss_first: tail_mean(&curve[..curve.len().min(50)], 50),
            diffusion_loss_last: tail_mean(&curve, 200),
            reward_loss_last: tail_mean(&losses.reward, 200),
            cost_loss_last: tail_mean(&losses.cost, 200),
        };
        Ok((
            Artifacts {
                env,
                normalizer,
                diffusion,
                guides,
                calibration: None,
            },
            report,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let hash = self.env_hash();
        write_json_atomic(
            &dir.join(DIFFUSION_FILE),
            &DiffusionFile {
                format_version: ARTIFACT_FORMAT_VERSION,
                env_hash: hash.clone(),
                env: self.env.clone(),
                normalizer: self.normalizer.clone(),
                model: self.diffusion.clone(),
            },
        )?;
        write_json_atomic(
            &dir.join(GUIDES_FILE),
            &GuidesFile {
                format_version: ARTIFACT_FORMAT_VERSION,
                env_hash: hash,
                guides: self.guides.clone(),
            },
        )?;
        if let Some(c) = &self.calibration {
            write_json_atomic(&dir.join(CALIBRATION_FILE), c)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let missing = |p: PathBuf| Error::Artifact {
            path: p,
            reason: "not found; run `trebi train` first".into(),
        };
        let dpath = dir.join(DIFFUSION_FILE);
        let gpath = dir.join(GUIDES_FILE);
        if !dpath.exists() {
            return Err(missing(dpath));
        }
        if !gpath.exists() {
            return Err(missing(gpath));
        }
        let d: DiffusionFile = read_json(&dpath)?;
        let g: GuidesFile = read_json(&gpath)?;
        for (path, version) in [(&dpath, d.format_version), (&gpath, g.format_version)] {
            if version != ARTIFACT_FORMAT_VERSION {
                return Err(Error::Artifact {
                    path: path.clone(),
                    reason: format!("format version {version}, expected {ARTIFACT_FORMAT_VERSION}"),
                });
            }
        }
        let hash = d.env.spec_hash();
        if d.env_hash != hash {
            return Err(Error::Artifact {
                path: dpath,
                reason: format!("stored env hash {} does not match env {}", d.env_hash, hash),
            });
        }
        if g.env_hash != hash {
            return Err(Error::Artifact {
                path: gpath,
                reason: format!("guide env hash {} does not match diffusion env hash {}", g.env_hash, hash),
            });
        }
        if g.guides.traj_dim() != d.model.traj_dim() || g.guides.horizon != d.model.horizon {
            return Err(Error::Artifact {
                path: gpath,
                reason: "guide and diffusion trajectory shapes differ".into(),
            });
        }
        let cpath = dir.join(CALIBRATION_FILE);
        let calibration = if cpath.exists() {
            let c: Calibration = read_json(&cpath)?;
            if c.env_hash != hash {
                return Err(Error::Artifact {
                    path: cpath,
                    reason: format!("calibration env hash {} does not match {}", c.env_hash, hash),
                });
            }
            Some(c)
        } else {
            None
        };
        Ok(Artifacts {
            env: d.env,
            normalizer: d.normalizer,
            diffusion: d.model,
            guides: g.guides,
            calibration,
        })
    }
}
