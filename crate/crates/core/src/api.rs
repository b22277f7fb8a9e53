//! Request and response types shared by the HTTP service, its client and
//! the command line, plus the stateful budget session behind the
//! `/v1/sessions` endpoints.

use std::path::PathBuf;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{Artifacts, Calibration, TrainingReport};
use crate::cmdp::{collect_dataset, BehaviorPolicy, Environment};
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, ExportPaths, ReportLine};
use crate::io::write_json_atomic;
use crate::oracle::{enumerate, report, OracleReport};
use crate::planner::{plan, BudgetTracker, CandidateStats, Plan, PlanMode, PlannerConfig};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub error: String,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::Shape { .. } => "shape",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::EnvUsage(_) => "env_usage",
            Error::Config(_) => "config",
            Error::EmptyWindows { .. } => "empty_windows",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::Guidance(_) => "guidance",
            Error::NonFiniteCandidate => "non_finite_candidate",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::UndefinedBound { .. } => "undefined_bound",
            Error::OracleInternal(_) => "oracle_internal",
            Error::EmptyInput(_) => "empty_input",
            Error::Artifact { .. } => "artifact",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        };
        ErrorBody {
            kind: kind.into(),
            error: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRequest {
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectResponse {
    pub path: PathBuf,
    pub episodes: usize,
    pub transitions: usize,
    pub mean_return: f64,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub artifacts: PathBuf,
    pub report: TrainingReport,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub config: ExperimentConfig,
    /// Raw environment state.
    pub state: Vec<f64>,
    /// Remaining scaled budget; `None` plans unconstrained.
    pub budget: Option<f64>,
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> PlanMode {
    PlanMode::Budgeted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub plan: Plan,
    /// First action in environment units.
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRequest {
    pub config: ExperimentConfig,
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub env: String,
    pub b_max: f64,
    pub config_hash: String,
    pub paths: ExportPaths,
    pub summary: Vec<ReportLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    /// Directory holding a finished sweep.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub lines: Vec<ReportLine>,
    pub text: String,
}

/// Exact oracle evaluation on a discrete environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleRequest {
    pub env: String,
    pub episodes: usize,
    pub behavior: Option<BehaviorPolicy>,
    pub seed: u64,
    /// Budgets as fractions of the largest enumerated trajectory cost.
    pub budget_ratios: Vec<f64>,
    pub alpha: f64,
    pub penalties: Vec<f64>,
    /// Transition constant; fitted from the data when absent.
    pub c_t: Option<f64>,
    pub c_c: f64,
    pub delta: f64,
    /// Optional JSON output path.
    pub out: Option<PathBuf>,
}

impl Default for OracleRequest {
    fn default() -> Self {
        OracleRequest {
            env: "grid-budget".into(),
            episodes: 2000,
            behavior: None,
            seed: 0,
            budget_ratios: vec![0.25, 0.5, 0.75, 1.0],
            alpha: 1.0,
            penalties: vec![0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0],
            c_t: None,
            c_c: 1.0,
            delta: 0.05,
            out: None,
        }
    }
}

impl OracleRequest {
    pub fn run(&self) -> Result<OracleReport> {
        let env = Environment::by_name(&self.env)?;
        let table_env = env
            .tabular()
            .ok_or_else(|| Error::Config(format!("oracle needs a discrete environment, got '{}'", self.env)))?;
        let behavior = self.behavior.clone().unwrap_or_else(|| BehaviorPolicy::default_for(&env));
        let mut rng = stream(self.seed, &[]);
        let ds = collect_dataset(&env, &behavior, self.episodes, &mut rng)?;
        let table = enumerate(&table_env, &ds)?;
        let max_cost = table.max_cost();
        let budgets: Vec<f64> = self.budget_ratios.iter().map(|r| r * max_cost).collect();
        let out = report(&table, &budgets, self.alpha, &self.penalties, self.c_t, self.c_c, self.delta)?;
        if let Some(path) = &self.out {
            write_json_atomic(path, &out)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub config: ExperimentConfig,
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    #[serde(with = "crate::io::unbounded")]
    pub budget: f64,
    #[serde(with = "crate::io::unbounded")]
    pub z: f64,
    pub t: usize,
    pub spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActRequest {
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActResponse {
    pub action: Vec<f64>,
    pub t: usize,
    #[serde(with = "crate::io::unbounded")]
    pub z: f64,
    pub replanned: bool,
    pub fallback: bool,
    pub chosen: CandidateStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRequest {
    pub cost: f64,
}

/// Online control loop for an external environment: the caller reports
/// states and realized costs, the session tracks the remaining budget and
/// replans on schedule.
pub struct BudgetSession {
    pub mode: PlanMode,
    pub planner: PlannerConfig,
    tracker: BudgetTracker,
    spent: f64,
    rng: StreamRng,
    current: Option<(Plan, usize)>,
    awaiting_cost: bool,
}

impl BudgetSession {
    pub fn new(art: &Artifacts, budget: f64, mode: PlanMode, planner: PlannerConfig, seed: u64) -> Result<Self> {
        if !(budget > 0.0) {
            return Err(Error::Config(format!("budget must be positive, got {budget}")));
        }
        planner.validate(art.diffusion.horizon)?;
        Ok(BudgetSession {
            mode,
            planner,
            tracker: BudgetTracker::new(budget, art.env.gamma()),
            spent: 0.0,
            rng: StreamRng::seed_from_u64(seed),
            current: None,
            awaiting_cost: false,
        })
    }

    pub fn info(&self, id: &str) -> SessionInfo {
        SessionInfo {
            id: id.to_string(),
            budget: self.tracker.budget,
            z: self.tracker.z,
            t: self.tracker.t,
            spent: self.spent,
        }
    }

    pub fn act(&mut self, art: &Artifacts, state: &[f64]) -> Result<ActResponse> {
        if self.awaiting_cost {
            return Err(Error::EnvUsage("report the cost of the previous action before acting again".into()));
        }
        let t = self.tracker.t;
        let replan = match &self.current {
            None => true,
            Some((_, t0)) => t - t0 >= self.planner.replan_interval,
        };
        if replan {
            let p = plan(art, state, self.tracker.z, self.mode, &self.planner, &mut self.rng)?;
            self.current = Some((p, t));
        }
        let (p, t0) = self.current.as_ref().expect("planned above");
        let action = art.env.action_from_features(p.trajectory.action(t - t0));
        self.awaiting_cost = true;
        Ok(ActResponse {
            action,
            t,
            z: self.tracker.z,
            replanned: replan,
            fallback: p.fallback,
            chosen: p.stats(),
        })
    }

    pub fn record_cost(&mut self, cost: f64) -> Result<()> {
        if !(cost >= 0.0 && cost.is_finite()) {
            return Err(Error::EnvUsage(format!("cost must be finite and non-negative, got {cost}")));
        }
        if !self.awaiting_cost {
            return Err(Error::EnvUsage("no action is awaiting a cost".into()));
        }
        self.spent += self.tracker.gamma.powi(self.tracker.t as i32) * cost;
        self.tracker.update(cost);
        self.awaiting_cost = false;
        Ok(())
    }
}
