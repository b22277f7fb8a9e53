//! `trebi`: command-line client for the planning service.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trebi_client::Client;
use trebi_core::api::{EpisodeRequest, OracleRequest, PlanRequest, ReportRequest};
use trebi_core::harness::{format_report, ExperimentConfig};
use trebi_core::planner::PlanMode;

#[derive(Parser)]
#[command(name = "trebi", version, about = "Budget-conditioned trajectory planning (client of trebi-server)")]
struct Cli {
    /// Base URL of a running trebi-server.
    #[arg(long, global = true, env = "TREBI_SERVER", default_value = "http://127.0.0.1:7878")]
    server: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with the behavior policy.
    Collect(ExperimentArgs),
    /// Train the diffusion model and guides, then calibrate the maximum budget.
    Train(ExperimentArgs),
    /// Plan once from a given state.
    Plan {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated raw state, e.g. `-0.7,0`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Vec<f64>,
        /// Remaining budget; omit to plan unconstrained.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Trebi)]
        mode: Mode,
    },
    /// Run one closed-loop episode.
    Episode {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        budget: f64,
        #[arg(long, value_enum, default_value_t = Mode::Trebi)]
        mode: Mode,
    },
    /// Run the budget sweep and export CSV/JSON results.
    Sweep(ExperimentArgs),
    /// Exact oracle on a discrete environment.
    Oracle(OracleArgs),
    /// Summarize the results of a finished sweep.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the server is reachable.
    Health,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Trebi,
    UnconstrainedGuided,
    BehaviorSample,
}

impl From<Mode> for PlanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Trebi => PlanMode::Budgeted,
            Mode::UnconstrainedGuided => PlanMode::UnconstrainedGuided,
            Mode::BehaviorSample => PlanMode::BehaviorSample,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name (reach-avoid, grid-budget, grid-budget-slip).
    #[arg(long)]
    env: Option<String>,
    /// Top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    budget_ratios: Option<Vec<f64>>,
    /// Episodes per budget and seed.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Violation penalty weight.
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    replan_interval: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value = "grid-budget")]
    env: String,
    /// Behavior episodes to collect.
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Budgets as fractions of the largest trajectory cost.
    #[arg(long, value_delimiter = ',')]
    budget_ratios: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Transition concentration constant; fitted from data when omitted.
    #[arg(long)]
    c_t: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    c_c: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn absolute(p: &Path) -> Result<PathBuf, String> {
    std::path::absolute(p).map_err(|e| format!("cannot resolve {}: {e}", p.display()))
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.env {
            cfg.env = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.budget_ratios {
            cfg.sweep.budget_ratios = v.clone();
        }
        if let Some(v) = self.episodes {
            cfg.sweep.episodes = v;
        }
        if let Some(v) = &self.seeds {
            cfg.sweep.seeds = v.clone();
        }
        if let Some(v) = self.candidates {
            cfg.planner.candidates = v;
        }
        if let Some(v) = self.alpha {
            cfg.planner.guide.alpha = v;
        }
        if let Some(v) = self.n {
            cfg.planner.guide.n = v;
        }
        if let Some(v) = self.replan_interval {
            cfg.planner.replan_interval = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        // The server resolves paths against its own working directory.
        cfg.out = absolute(&cfg.out)?;
        if let Some(p) = &cfg.artifacts {
            cfg.artifacts = Some(absolute(p)?);
        }
        if let Some(p) = &cfg.data.path {
            cfg.data.path = Some(absolute(p)?);
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("response serializes"));
}

async fn run(cli: Cli) -> Result<(), String> {
    let client = Client::new(&cli.server);
    let err = |e: trebi_client::ClientError| e.to_string();
    match cli.command {
        Command::Health => print_json(&client.health().await.map_err(err)?),
        Command::Collect(exp) => print_json(&client.collect(&exp.resolve()?).await.map_err(err)?),
        Command::Train(exp) => print_json(&client.train(&exp.resolve()?).await.map_err(err)?),
        Command::Plan {
            exp,
            state,
            budget,
            mode,
        } => {
            let config = exp.resolve()?;
            let seed = config.seed;
            let req = PlanRequest {
                config,
                state,
                budget,
                mode: mode.into(),
                seed,
            };
            print_json(&client.plan(&req).await.map_err(err)?);
        }
        Command::Episode { exp, budget, mode } => {
            let config = exp.resolve()?;
            let seed = config.seed;
            let req = EpisodeRequest {
                config,
                budget,
                mode: mode.into(),
                seed,
            };
            print_json(&client.episode(&req).await.map_err(err)?);
        }
        Command::Sweep(exp) => {
            let resp = client.sweep(&exp.resolve()?).await.map_err(err)?;
            println!("env {}  b_max {:.6}  config {}", resp.env, resp.b_max, resp.config_hash);
            print!("{}", format_report(&resp.summary));
            println!("stats: {}", resp.paths.stats.display());
            println!("episodes: {}", resp.paths.episodes.display());
            println!("results: {}", resp.paths.results.display());
        }
        Command::Oracle(args) => {
            let mut req = OracleRequest {
                env: args.env,
                episodes: args.episodes,
                seed: args.seed,
                alpha: args.alpha,
                c_t: args.c_t,
                c_c: args.c_c,
                delta: args.delta,
                out: args.out.as_deref().map(absolute).transpose()?,
                ..Default::default()
            };
            if let Some(r) = args.budget_ratios {
                req.budget_ratios = r;
            }
            print_json(&client.oracle(&req).await.map_err(err)?);
        }
        Command::Report { out } => {
            let resp = client.report(&ReportRequest { dir: absolute(&out)? }).await.map_err(err)?;
            print!("{}", resp.text);
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trebi: {e}");
            ExitCode::FAILURE
        }
    }
}
