//! Async client for the reconstruction service.

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use visrecon_core::api::{AblateRequest, ApiError, CreateSession, EvaluateRequest, RunResponse, SessionInfo};
use visrecon_core::evaluation::ReconMetrics;
use visrecon_core::pipeline::FragmentReport;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {}", .error.message)]
    Api { status: u16, error: ApiError },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Field named by a config error, if this is one.
    pub fn config_field(&self) -> Option<&str> {
        match self {
            ClientError::Api { error, .. } if error.kind == "config" => error.field.as_deref(),
            _ => None,
        }
    }

    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { error, .. } => Some(&error.kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

async fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await?;
    let error = serde_json::from_str(&text).unwrap_or(ApiError {
        kind: "http".into(),
        field: None,
        message: text,
    });
    Err(ClientError::Api {
        status: status.as_u16(),
        error,
    })
}

async fn json<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let text = check(resp).await?.text().await?;
    serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: base.trim_end_matches('/').to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn get(&self, path: &str) -> Result<Response> {
        check(self.http.get(self.url(path)).send().await?).await
    }

    async fn post<B: Serialize + ?Sized>(&self, path: &str, body: &B) -> Result<Response> {
        Ok(self.http.post(self.url(path)).json(body).send().await?)
    }

    pub async fn health(&self) -> Result<()> {
        self.get("/health").await.map(|_| ())
    }

    pub async fn create_session(&self, req: &CreateSession) -> Result<SessionInfo> {
        json(self.post("/sessions", req).await?).await
    }

    pub async fn sessions(&self) -> Result<Vec<SessionInfo>> {
        json(self.get("/sessions").await?).await
    }

    pub async fn session(&self, id: &str) -> Result<SessionInfo> {
        json(self.get(&format!("/sessions/{id}")).await?).await
    }

    pub async fn delete_session(&self, id: &str) -> Result<()> {
        check(self.http.delete(self.url(&format!("/sessions/{id}"))).send().await?).await?;
        Ok(())
    }

    /// Integrates the next fragment; `None` once every fragment is in.
    pub async fn next_fragment(&self, id: &str) -> Result<Option<FragmentReport>> {
        let resp = check(self.post(&format!("/sessions/{id}/fragments/next"), &()).await?).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        json(resp).await.map(Some)
    }

    /// Integrates every remaining fragment.
    pub async fn run(&self, id: &str) -> Result<RunResponse> {
        json(self.post(&format!("/sessions/{id}/run"), &()).await?).await
    }

    pub async fn reports(&self, id: &str) -> Result<Vec<FragmentReport>> {
        json(self.get(&format!("/sessions/{id}/fragments")).await?).await
    }

    /// Binary PLY of the current mesh.
    pub async fn mesh(&self, id: &str) -> Result<Vec<u8>> {
        Ok(self.get(&format!("/sessions/{id}/mesh")).await?.bytes().await?.to_vec())
    }

    /// Metrics JSON as written to `metrics.json`; `None` without a reference scene.
    pub async fn metrics_json(&self, id: &str) -> Result<Option<String>> {
        match self.get(&format!("/sessions/{id}/metrics")).await {
            Ok(resp) => Ok(Some(resp.text().await?)),
            Err(e) if e.kind() == Some("no_metrics") => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub async fn log(&self, id: &str) -> Result<String> {
        Ok(self.get(&format!("/sessions/{id}/log")).await?.text().await?)
    }

    pub async fn checkpoint(&self, id: &str) -> Result<Vec<u8>> {
        Ok(self
            .get(&format!("/sessions/{id}/checkpoint"))
            .await?
            .bytes()
            .await?
            .to_vec())
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<ReconMetrics> {
        json(self.post("/evaluate", req).await?).await
    }

    /// CSV with one row per run.
    pub async fn ablate(&self, req: &AblateRequest) -> Result<String> {
        Ok(check(self.post("/ablate", req).await?).await?.text().await?)
    }
}
