//! Thin async client for the planning service.

use serde::de::DeserializeOwned;
use serde::Serialize;
use trebi_core::api::{
    ActRequest, ActResponse, CollectResponse, ConfigRequest, CostRequest, CreateSessionRequest, EpisodeRequest,
    ErrorBody, Health, OracleRequest, PlanRequest, PlanResponse, ReportRequest, ReportResponse, SessionInfo,
    SweepResponse, TrainResponse,
};
use trebi_core::harness::ExperimentConfig;
use trebi_core::oracle::OracleReport;
use trebi_core::planner::EpisodeResult;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("server returned {status} ({}): {}", .body.kind, .body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn finish<T: DeserializeOwned>(&self, url: String, resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        if status.is_success() {
            serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
                url,
                reason: e.to_string(),
            })
        } else {
            let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
                kind: "http".into(),
                error: String::from_utf8_lossy(&bytes).into_owned(),
            });
            Err(ClientError::Api {
                status: status.as_u16(),
                body,
            })
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{}", self.base, path);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        self.finish(url, resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{}", self.base, path);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        self.finish(url, resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn collect(&self, config: &ExperimentConfig) -> Result<CollectResponse> {
        self.post("/v1/collect", &ConfigRequest { config: config.clone() }).await
    }

    pub async fn train(&self, config: &ExperimentConfig) -> Result<TrainResponse> {
        self.post("/v1/train", &ConfigRequest { config: config.clone() }).await
    }

    pub async fn plan(&self, req: &PlanRequest) -> Result<PlanResponse> {
        self.post("/v1/plan", req).await
    }

    pub async fn episode(&self, req: &EpisodeRequest) -> Result<EpisodeResult> {
        self.post("/v1/episode", req).await
    }

    pub async fn sweep(&self, config: &ExperimentConfig) -> Result<SweepResponse> {
        self.post("/v1/sweep", &ConfigRequest { config: config.clone() }).await
    }

    pub async fn oracle(&self, req: &OracleRequest) -> Result<OracleReport> {
        self.post("/v1/oracle", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse> {
        self.post("/v1/report", req).await
    }

    pub async fn create_session(&self, req: &CreateSessionRequest) -> Result<SessionInfo> {
        self.post("/v1/sessions", req).await
    }

    pub async fn session(&self, id: &str) -> Result<SessionInfo> {
        self.get(&format!("/v1/sessions/{id}")).await
    }

    pub async fn act(&self, id: &str, state: &[f64]) -> Result<ActResponse> {
        self.post(&format!("/v1/sessions/{id}/act"), &ActRequest { state: state.to_vec() }).await
    }

    pub async fn report_cost(&self, id: &str, cost: f64) -> Result<SessionInfo> {
        self.post(&format!("/v1/sessions/{id}/cost"), &CostRequest { cost }).await
    }

    pub async fn delete_session(&self, id: &str) -> Result<()> {
        let url = format!("{}/v1/sessions/{id}", self.base);
        let resp = self
            .http
            .delete(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        if resp.status().is_success() {
            Ok(())
        } else {
            self.finish::<()>(url, resp).await
        }
    }
}
