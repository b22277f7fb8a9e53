//! HTTP/JSON front end for the planning toolkit.
//!
//! Every compute-heavy handler runs on the blocking pool. Trained artifacts
//! are cached per directory; online budget sessions live in memory until
//! deleted.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use trebi_core::api::{
    ActRequest, ActResponse, BudgetSession, CollectResponse, ConfigRequest, CostRequest, CreateSessionRequest,
    EpisodeRequest, ErrorBody, Health, OracleRequest, PlanRequest, PlanResponse, ReportRequest, ReportResponse,
    SessionInfo, SweepResponse, TrainResponse,
};
use trebi_core::artifacts::Artifacts;
use trebi_core::harness::{self, ExperimentConfig};
use trebi_core::oracle::OracleReport;
use trebi_core::planner::{self, EpisodeResult};
use trebi_core::rng::stream;
use trebi_core::Error;

struct Session {
    artifacts: Arc<Artifacts>,
    inner: BudgetSession,
}

#[derive(Default)]
pub struct AppState {
    artifacts: Mutex<HashMap<PathBuf, Arc<Artifacts>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    fn cached_artifacts(&self, cfg: &ExperimentConfig) -> Result<Arc<Artifacts>, Error> {
        let dir = cfg.artifacts_dir();
        if let Some(a) = self.artifacts.lock().expect("cache lock").get(&dir) {
            return Ok(a.clone());
        }
        let art = Arc::new(harness::load_artifacts(cfg)?);
        self.artifacts.lock().expect("cache lock").insert(dir, art.clone());
        Ok(art)
    }

    fn invalidate(&self, dir: &Path) {
        self.artifacts.lock().expect("cache lock").remove(dir);
    }
}

pub enum ApiError {
    Core(Error),
    NotFound(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Core(e) => {
                let status = match &e {
                    Error::Artifact { .. } => StatusCode::NOT_FOUND,
                    Error::Config(_)
                    | Error::Shape { .. }
                    | Error::EnvUsage(_)
                    | Error::EmptyWindows { .. }
                    | Error::StepOutOfRange { .. }
                    | Error::InfeasibleBudget { .. }
                    | Error::UndefinedBound { .. }
                    | Error::EmptyInput(_)
                    | Error::Format(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, ErrorBody::from(&e))
            }
            ApiError::NotFound(what) => (
                StatusCode::NOT_FOUND,
                ErrorBody {
                    kind: "not_found".into(),
                    error: what,
                },
            ),
            ApiError::Internal(what) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    kind: "internal".into(),
                    error: what,
                },
            ),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(Json(v)),
        Ok(Err(e)) => Err(e.into()),
        Err(e) => Err(ApiError::Internal(format!("worker failed: {e}"))),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn collect(Json(req): Json<ConfigRequest>) -> ApiResult<CollectResponse> {
    blocking(move || {
        let cfg = req.config;
        cfg.validate()?;
        let ds = harness::collect(&cfg)?;
        let n = ds.episodes.len() as f64;
        Ok(CollectResponse {
            path: cfg.dataset_path(),
            episodes: ds.episodes.len(),
            transitions: ds.num_transitions(),
            mean_return: ds.episode_returns().iter().sum::<f64>() / n,
            mean_cost: ds.episode_costs().iter().sum::<f64>() / n,
        })
    })
    .await
}

async fn train(State(state): State<Arc<AppState>>, Json(req): Json<ConfigRequest>) -> ApiResult<TrainResponse> {
    blocking(move || {
        let cfg = req.config;
        cfg.validate()?;
        let ds = harness::load_or_collect(&cfg)?;
        let (art, report) = harness::train(&cfg, &ds)?;
        state.invalidate(&cfg.artifacts_dir());
        Ok(TrainResponse {
            artifacts: cfg.artifacts_dir(),
            report,
            calibration: art.calibration,
        })
    })
    .await
}

async fn plan(State(state): State<Arc<AppState>>, Json(req): Json<PlanRequest>) -> ApiResult<PlanResponse> {
    blocking(move || {
        req.config.validate()?;
        let art = state.cached_artifacts(&req.config)?;
        let z = req.budget.unwrap_or(f64::INFINITY);
        let mut rng = stream(req.seed, &[]);
        let p = planner::plan(&art, &req.state, z, req.mode, &req.config.planner, &mut rng)?;
        let action = art.env.action_from_features(p.trajectory.action(0));
        Ok(PlanResponse { plan: p, action })
    })
    .await
}

async fn episode(State(state): State<Arc<AppState>>, Json(req): Json<EpisodeRequest>) -> ApiResult<EpisodeResult> {
    blocking(move || {
        req.config.validate()?;
        let art = state.cached_artifacts(&req.config)?;
        let env = req.config.environment()?;
        let mut rng = stream(req.seed, &[]);
        planner::run_episode(&env, &art, req.budget, req.mode, &req.config.planner, &mut rng)
    })
    .await
}

async fn sweep(State(state): State<Arc<AppState>>, Json(req): Json<ConfigRequest>) -> ApiResult<SweepResponse> {
    blocking(move || {
        let cfg = req.config;
        cfg.validate()?;
        let art = state.cached_artifacts(&cfg)?;
        let (results, steps) = harness::run_sweep(&cfg, &art)?;
        let paths = harness::export(&cfg.out, &results, &steps)?;
        Ok(SweepResponse {
            env: results.env.clone(),
            b_max: results.b_max,
            config_hash: results.config_hash.clone(),
            paths,
            summary: harness::summarize(&results.stats),
        })
    })
    .await
}

async fn oracle(Json(req): Json<OracleRequest>) -> ApiResult<OracleReport> {
    blocking(move || req.run()).await
}

async fn report(Json(req): Json<ReportRequest>) -> ApiResult<ReportResponse> {
    blocking(move || {
        let rows = harness::read_stats_csv(&req.dir.join(harness::STATS_FILE))?;
        let lines = harness::summarize(&rows);
        let text = harness::format_report(&lines);
        Ok(ReportResponse { lines, text })
    })
    .await
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSessionRequest>,
) -> ApiResult<SessionInfo> {
    let st = state.clone();
    let Json(session) = blocking(move || {
        req.config.validate()?;
        let art = st.cached_artifacts(&req.config)?;
        let inner = BudgetSession::new(&art, req.budget, req.mode, req.config.planner.clone(), req.seed)?;
        Ok(Session { artifacts: art, inner })
    })
    .await?;
    let id = uuid::Uuid::new_v4().to_string();
    let info = session.inner.info(&id);
    state.sessions.lock().expect("session lock").insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(info))
}

fn find_session(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state
        .sessions
        .lock()
        .expect("session lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("no session '{id}'")))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionInfo> {
    let s = find_session(&state, &id)?;
    let info = s.lock().expect("session lock").inner.info(&id);
    Ok(Json(info))
}

async fn act(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ActRequest>,
) -> ApiResult<ActResponse> {
    let s = find_session(&state, &id)?;
    blocking(move || {
        let mut guard = s.lock().expect("session lock");
        let session = &mut *guard;
        session.inner.act(&session.artifacts, &req.state)
    })
    .await
}

async fn cost(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<CostRequest>,
) -> ApiResult<SessionInfo> {
    let s = find_session(&state, &id)?;
    let mut guard = s.lock().expect("session lock");
    guard.inner.record_cost(req.cost)?;
    Ok(Json(guard.inner.info(&id)))
}

async fn delete_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().expect("session lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::NotFound(format!("no session '{id}'"))),
    }
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/collect", post(collect))
        .route("/v1/train", post(train))
        .route("/v1/plan", post(plan))
        .route("/v1/episode", post(episode))
        .route("/v1/sweep", post(sweep))
        .route("/v1/oracle", post(oracle))
        .route("/v1/report", post(report))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/act", post(act))
        .route("/v1/sessions/{id}/cost", post(cost))
        .with_state(state)
}

/// Serves on an already bound listener until the process stops.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, app(Arc::new(AppState::default()))).await
}
