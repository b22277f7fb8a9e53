//! Experiment orchestration: configuration, collect/train/calibrate/sweep
//! pipelines, box statistics and CSV/JSON export.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{Artifacts, Calibration, ModelConfig, TrainingReport};
use crate::cmdp::{collect_dataset, BehaviorPolicy, Dataset, Environment};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::planner::{run_episode, EpisodeResult, PlanMode, PlannerConfig, StepLog};
use crate::rng::{derive_seed, stream, StreamRng};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const STATS_CSV_HEADER: &str =
    "env,budget,ratio,metric,count,mean,median,q1,q3,whisker_lo,whisker_hi,outliers,seed_set,config_hash";
pub const EPISODES_CSV_HEADER: &str =
    "env,planner,budget,ratio,seed,episode,reward,cost,normalized_cost,violation,fallbacks";
pub const STATS_FILE: &str = "stats.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DEFAULT_RATIOS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

// Stream tags keep every consumer of the top-level seed independent.
const TAG_COLLECT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_CALIBRATE: u64 = 3;
const TAG_EPISODE: u64 = 4;
const TAG_BASELINE: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset file; collected into the output dir when absent.
    pub path: Option<PathBuf>,
    pub episodes: usize,
    pub behavior: Option<BehaviorPolicy>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            episodes: 400,
            behavior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub budget_ratios: Vec<f64>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Overrides the calibrated maximum budget.
    pub b_max: Option<f64>,
    pub calibration_episodes: usize,
    pub baselines: Vec<PlanMode>,
    /// Write the per-step JSON-lines log.
    pub step_logs: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budget_ratios: DEFAULT_RATIOS.to_vec(),
            episodes: 60,
            seeds: vec![0, 1, 2],
            b_max: None,
            calibration_episodes: 60,
            baselines: vec![PlanMode::UnconstrainedGuided],
            step_logs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub seed: u64,
    /// Output directory for datasets, artifacts and results.
    pub out: PathBuf,
    /// Artifact directory; defaults to `<out>/model`.
    pub artifacts: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub planner: PlannerConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "reach-avoid".into(),
            seed: 0,
            out: PathBuf::from("runs/reach-avoid"),
            artifacts: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            planner: PlannerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.environment()?;
        self.model.validate()?;
        self.planner.validate(self.model.horizon)?;
        let s = &self.sweep;
        if s.budget_ratios.is_empty() || s.budget_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config(format!("budget ratios must be nonempty and in (0, 1], got {:?}", s.budget_ratios)));
        }
        if s.episodes == 0 || s.calibration_episodes == 0 {
            return Err(Error::Config("episode counts must be at least 1".into()));
        }
        if s.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(b) = s.b_max {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("b_max must be positive, got {b}")));
            }
        }
        if s.baselines.contains(&PlanMode::Budgeted) {
            return Err(Error::Config("baselines may not include the budgeted planner".into()));
        }
        if self.data.episodes == 0 && self.data.path.is_none() {
            return Err(Error::Config("data.episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::by_name(&self.env)
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.artifacts.clone().unwrap_or_else(|| self.out.join("model"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out.join(DATASET_FILE))
    }

    /// Hash of everything that affects results (output paths excluded).
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        canon.artifacts = None;
        canon.data.path = None;
        let text = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Box-plot summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles, mean and 1.5 IQR whiskers clamped to the data.
pub fn aggregate(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::EmptyInput("values to aggregate"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("cannot aggregate non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence).collect();
    Ok(BoxStats {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median,
        q1,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(median),
        whisker_hi: inside.last().copied().unwrap_or(median),
        outliers: sorted.len() - inside.len(),
    })
}

/// One line of the stats CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub env: String,
    pub budget: f64,
    pub ratio: f64,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: usize,
    pub seed_set: String,
    pub config_hash: String,
}

impl StatsRow {
    pub fn stats(&self) -> BoxStats {
        BoxStats {
            count: self.count,
            mean: self.mean,
            median: self.median,
            q1: self.q1,
            q3: self.q3,
            whisker_lo: self.whisker_lo,
            whisker_hi: self.whisker_hi,
            outliers: self.outliers,
        }
    }
}

/// One executed episode of a sweep, evaluated against one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: String,
    pub planner: String,
    pub budget: f64,
    pub ratio: f64,
    pub seed: u64,
    pub episode: usize,
    pub reward: f64,
    pub cost: f64,
    pub normalized_cost: f64,
    pub violation: u8,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub schema_version: u32,
    pub env: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub b_max: f64,
    pub budgets: Vec<(f64, f64)>,
    pub stats: Vec<StatsRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl SweepResults {
    pub fn row(&self, ratio: f64, metric: &str) -> Option<&StatsRow> {
        self.stats.iter().find(|r| r.ratio == ratio && r.metric == metric)
    }
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub planner: String,
    pub ratio: f64,
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    pub seed: u64,
    pub episode: usize,
    #[serde(flatten)]
    pub step: StepLog,
}

fn metric_prefix(mode: PlanMode) -> &'static str {
    match mode {
        PlanMode::Budgeted => "",
        PlanMode::UnconstrainedGuided => "baseline_unconstrained_",
        PlanMode::BehaviorSample => "baseline_behavior_",
    }
}

/// Loads the configured dataset, or collects and stores a fresh one.
pub fn collect(cfg: &ExperimentConfig) -> Result<Dataset> {
    let env = cfg.environment()?;
    let behavior = cfg.data.behavior.clone().unwrap_or_else(|| BehaviorPolicy::default_for(&env));
    let mut rng = stream(cfg.seed, &[TAG_COLLECT]);
    let ds = collect_dataset(&env, &behavior, cfg.data.episodes, &mut rng)?;
    ds.save(&cfg.dataset_path())?;
    Ok(ds)
}

pub fn load_or_collect(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    if path.exists() {
        let ds = Dataset::load(&path)?;
        let env = cfg.environment()?;
        if ds.header.env_hash != env.spec_hash() {
            return Err(Error::Artifact {
                path,
                reason: format!("dataset was collected on a different environment than '{}'", cfg.env),
            });
        }
        Ok(ds)
    } else if cfg.data.path.is_some() {
        Err(Error::Artifact {
            path,
            reason: "dataset not found; run `trebi collect` first".into(),
        })
    } else {
        collect(cfg)
    }
}

/// Mean cost and reward of the unconstrained guided planner.
pub fn calibrate(art: &Artifacts, cfg: &ExperimentConfig) -> Result<Calibration> {
    let env = cfg.environment()?;
    let results: Vec<EpisodeResult> = (0..cfg.sweep.calibration_episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream(cfg.seed, &[TAG_CALIBRATE, e as u64]);
            run_episode(&env, art, f64::INFINITY, PlanMode::UnconstrainedGuided, &cfg.planner, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok(Calibration {
        env_hash: env.spec_hash(),
        b_max: results.iter().map(|r| r.cost).sum::<f64>() / n,
        mean_reward: results.iter().map(|r| r.reward).sum::<f64>() / n,
        episodes: results.len(),
        seed: cfg.seed,
    })
}

/// Trains, calibrates and stores artifacts in the configured directory.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(Artifacts, TrainingReport)> {
    let env = cfg.environment()?;
    if dataset.header.env_hash != env.spec_hash() {
        return Err(Error::Config(format!("dataset environment does not match '{}'", cfg.env)));
    }
    let (mut art, report) = Artifacts::train(dataset, &cfg.model, derive_seed(cfg.seed, &[TAG_TRAIN]))?;
    art.calibration = Some(calibrate(&art, cfg)?);
    art.save(&cfg.artifacts_dir())?;
    Ok((art, report))
}

pub fn load_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let art = Artifacts::load(&cfg.artifacts_dir())?;
    let env = cfg.environment()?;
    if art.env_hash() != env.spec_hash() {
        return Err(Error::Artifact {
            path: cfg.artifacts_dir(),
            reason: format!("artifacts were trained on '{}', not '{}'", art.env.name(), cfg.env),
        });
    }
    Ok(art)
}

pub fn resolve_b_max(cfg: &ExperimentConfig, art: &Artifacts) -> Result<f64> {
    match (cfg.sweep.b_max, &art.calibration) {
        (Some(b), _) => Ok(b),
        (None, Some(c)) if c.b_max > 0.0 => Ok(c.b_max),
        (None, Some(c)) => Err(Error::Config(format!(
            "calibrated b_max is {}; set sweep.b_max explicitly",
            c.b_max
        ))),
        (None, None) => Err(Error::Artifact {
            path: cfg.artifacts_dir(),
            reason: "no calibration found; run `trebi train` or set sweep.b_max".into(),
        }),
    }
}

/// Runs the budget sweep and the baselines. Every episode draws from a
/// stream fixed by `(seed, episode)`, shared across budgets.
pub fn run_sweep(cfg: &ExperimentConfig, art: &Artifacts) -> Result<(SweepResults, Vec<StepRecord>)> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let b_max = resolve_b_max(cfg, art)?;
    let budgets: Vec<(f64, f64)> = cfg.sweep.budget_ratios.iter().map(|&r| (r, r * b_max)).collect();
    let hash = cfg.config_hash();
    let seed_set = cfg.sweep.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let env_name = env.name();

    struct Cell {
        mode: PlanMode,
        budget_index: Option<usize>,
        seed: u64,
        episode: usize,
    }
    let mut cells = Vec::new();
    for &seed in &cfg.sweep.seeds {
        for k in 0..budgets.len() {
            for episode in 0..cfg.sweep.episodes {
                cells.push(Cell {
                    mode: PlanMode::Budgeted,
                    budget_index: Some(k),
                    seed,
                    episode,
                });
            }
        }
        for &mode in &cfg.sweep.baselines {
            for episode in 0..cfg.sweep.episodes {
                cells.push(Cell {
                    mode,
                    budget_index: None,
                    seed,
                    episode,
                });
            }
        }
    }
    let outcomes: Vec<EpisodeResult> = cells
        .par_iter()
        .map(|cell| {
            let (budget, tag) = match cell.budget_index {
                Some(k) => (budgets[k].1, TAG_EPISODE),
                None => (f64::INFINITY, TAG_BASELINE),
            };
            let mut rng: StreamRng = StreamRng::seed_from_u64(derive_seed(cell.seed, &[tag, cell.episode as u64]));
            run_episode(&env, art, budget, cell.mode, &cfg.planner, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut steps = Vec::new();
    for (cell, result) in cells.iter().zip(&outcomes) {
        let targets: Vec<(f64, f64)> = match cell.budget_index {
            Some(k) => vec![budgets[k]],
            None => budgets.clone(),
        };
        for (ratio, budget) in targets {
            records.push(EpisodeRecord {
                env: env_name.clone(),
                planner: cell.mode.tag().to_string(),
                budget,
                ratio,
                seed: cell.seed,
                episode: cell.episode,
                reward: result.reward,
                cost: result.cost,
                normalized_cost: result.cost / budget,
                violation: result.violates(budget) as u8,
                fallbacks: result.fallbacks,
            });
        }
        if cfg.sweep.step_logs {
            let (ratio, budget) = cell.budget_index.map(|k| budgets[k]).unwrap_or((0.0, f64::INFINITY));
            for s in &result.steps {
                steps.push(StepRecord {
                    planner: cell.mode.tag().to_string(),
                    ratio,
                    budget,
                    seed: cell.seed,
                    episode: cell.episode,
                    step: s.clone(),
                });
            }
        }
    }

    let mut stats = Vec::new();
    let modes: Vec<PlanMode> = std::iter::once(PlanMode::Budgeted).chain(cfg.sweep.baselines.iter().copied()).collect();
    for &(ratio, budget) in &budgets {
        for &mode in &modes {
            let chosen: Vec<&EpisodeRecord> =
                records.iter().filter(|r| r.ratio == ratio && r.planner == mode.tag()).collect();
            let series: [(&str, Vec<f64>); 3] = [
                ("normalized_cost", chosen.iter().map(|r| r.normalized_cost).collect()),
                ("reward", chosen.iter().map(|r| r.reward).collect()),
                ("violation", chosen.iter().map(|r| r.violation as f64).collect()),
            ];
            for (name, values) in series {
                let b = aggregate(&values)?;
                stats.push(StatsRow {
                    env: env_name.clone(),
                    budget,
                    ratio,
                    metric: format!("{}{}", metric_prefix(mode), name),
                    count: b.count,
                    mean: b.mean,
                    median: b.median,
                    q1: b.q1,
                    q3: b.q3,
                    whisker_lo: b.whisker_lo,
                    whisker_hi: b.whisker_hi,
                    outliers: b.outliers,
                    seed_set: seed_set.clone(),
                    config_hash: hash.clone(),
                });
            }
        }
    }
    Ok((
        SweepResults {
            schema_version: RESULTS_SCHEMA_VERSION,
            env: env_name,
            config_hash: hash,
            seeds: cfg.sweep.seeds.clone(),
            b_max,
            budgets,
            stats,
            episodes: records,
        },
        steps,
    ))
}

pub fn write_stats_csv(path: &Path, rows: &[StatsRow]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<StatsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != STATS_CSV_HEADER {
        return Err(Error::Format(format!(
            "{}: header '{}' does not match '{STATS_CSV_HEADER}'",
            path.display(),
            header.join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_episodes_csv(path: &Path, rows: &[EpisodeRecord]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_steps(path: &Path, steps: &[StepRecord]) -> Result<()> {
    write_atomic(path, |w| {
        for s in steps {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

/// Paths of the files written by [`export`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPaths {
    pub stats: PathBuf,
    pub episodes: PathBuf,
    pub results: PathBuf,
    pub steps: Option<PathBuf>,
}

pub fn export(dir: &Path, results: &SweepResults, steps: &[StepRecord]) -> Result<ExportPaths> {
    if results.stats.is_empty() {
        return Err(Error::EmptyInput("sweep results"));
    }
    let paths = ExportPaths {
        stats: dir.join(STATS_FILE),
        episodes: dir.join(EPISODES_FILE),
        results: dir.join(RESULTS_FILE),
        steps: (!steps.is_empty()).then(|| dir.join(STEPS_FILE)),
    };
    write_stats_csv(&paths.stats, &results.stats)?;
    write_episodes_csv(&paths.episodes, &results.episodes)?;
    write_json_atomic(&paths.results, results)?;
    if let Some(p) = &paths.steps {
        write_steps(p, steps)?;
    }
    Ok(paths)
}

/// Full pipeline: dataset, artifacts (trained when missing), sweep, export.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(SweepResults, ExportPaths)> {
    cfg.validate()?;
    let art = match load_artifacts(cfg) {
        Ok(a) => a,
        Err(Error::Artifact { .. }) if !cfg.artifacts_dir().join(crate::artifacts::DIFFUSION_FILE).exists() => {
            let ds = load_or_collect(cfg)?;
            train(cfg, &ds)?.0
        }
        Err(e) => return Err(e),
    };
    let (results, steps) = run_sweep(cfg, &art)?;
    let paths = export(&cfg.out, &results, &steps)?;
    Ok((results, paths))
}

/// Checks run by `report` on a finished sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub ratio: f64,
    pub budget: f64,
    pub violation_rate: f64,
    pub median_normalized_cost: f64,
    pub mean_reward: f64,
    pub baseline_violation_rate: Option<f64>,
    pub baseline_mean_reward: Option<f64>,
}

pub fn summarize(rows: &[StatsRow]) -> Vec<ReportLine> {
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let find = |ratio: f64, metric: &str| rows.iter().find(|r| r.ratio == ratio && r.metric == metric);
    ratios
        .into_iter()
        .filter_map(|ratio| {
            let cost = find(ratio, "normalized_cost")?;
            Some(ReportLine {
                ratio,
                budget: cost.budget,
                violation_rate: find(ratio, "violation")?.mean,
                median_normalized_cost: cost.median,
                mean_reward: find(ratio, "reward")?.mean,
                baseline_violation_rate: find(ratio, "baseline_unconstrained_violation").map(|r| r.mean),
                baseline_mean_reward: find(ratio, "baseline_unconstrained_reward").map(|r| r.mean),
            })
        })
        .collect()
}

pub fn format_report(lines: &[ReportLine]) -> String {
    let mut out = String::from("ratio  budget     viol   med_ncost  mean_reward  base_viol  base_reward\n");
    for l in lines {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:>9.4}")).unwrap_or_else(|| format!("{:>9}", "-"));
        out.push_str(&format!(
            "{:<5.2}  {:<9.4}  {:<5.3}  {:<9.4}  {:<11.4}  {}  {}\n",
            l.ratio,
            l.budget,
            l.violation_rate,
            l.median_normalized_cost,
            l.mean_reward,
            opt(l.baseline_violation_rate),
            opt(l.baseline_mean_reward)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let b = aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.median, b.q1, b.q3, b.mean, b.outliers), (3.0, 2.0, 4.0, 3.0, 0));
        assert_eq!((b.whisker_lo, b.whisker_hi), (1.0, 5.0));
        let c = aggregate(&[2.5; 7]).unwrap();
        assert_eq!((c.q1, c.q3, c.whisker_lo, c.whisker_hi, c.outliers), (2.5, 2.5, 2.5, 2.5, 0));
        let mut v: Vec<f64> = (1..=9).map(f64::from).collect();
        v.push(100.0);
        let d = aggregate(&v).unwrap();
        assert_eq!(d.outliers, 1);
        assert_eq!(d.whisker_hi, 9.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn box_invariants_on_random_samples() {
        use rand::Rng;
        let mut rng = stream(0, &[]);
        for _ in 0..200 {
            let n = rng.random_range(1..50);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0f64).powi(3)).collect();
            let b = aggregate(&v).unwrap();
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &x| (a.min(x), c.max(x)));
            assert!(b.q1 <= b.median && b.median <= b.q3);
            assert!(lo <= b.whisker_lo && b.whisker_hi <= hi);
            assert!(b.whisker_lo <= b.whisker_hi);
            assert!(b.whisker_lo >= b.q1 - 1.5 * (b.q3 - b.q1) - 1e-9);
            assert!(b.whisker_hi <= b.q3 + 1.5 * (b.q3 - b.q1) + 1e-9);
        }
    }

    #[test]
    fn default_grid_and_header() {
        assert_eq!(SweepConfig::default().budget_ratios.len(), 5);
        let row = StatsRow {
            env: "e".into(),
            budget: 1.0,
            ratio: 1.0,
            metric: "reward".into(),
            count: 1,
            mean: 0.0,
            median: 0.0,
            q1: 0.0,
            q3: 0.0,
            whisker_lo: 0.0,
            whisker_hi: 0.0,
            outliers: 0,
            seed_set: "0".into(),
            config_hash: "h".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_stats_csv(&p, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), STATS_CSV_HEADER);
        assert_eq!(read_stats_csv(&p).unwrap(), vec![row]);
    }

    #[test]
    fn config_validation_and_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.sweep.budget_ratios = vec![0.0];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.sweep.budget_ratios = vec![1.5];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.sweep.episodes = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.env = "nowhere".into();
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn config_hash_ignores_output_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 9;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
