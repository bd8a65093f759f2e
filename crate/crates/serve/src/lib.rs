//! HTTP front end for a trained response selector.
//!
//! `POST /v1/select` ranks caller-supplied candidates, `POST /v1/converse`
//! first collects candidates from the configured agent endpoints, and
//! `GET /v1/health` reports the loaded checkpoint. The model snapshot lives
//! behind an `Arc` that [`AppState::reload`] swaps atomically, so in-flight
//! requests finish on the snapshot they started with.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use nrs_core::corpus::{Candidate, Utterance};
use nrs_core::embed::{EmbedError, Featurizer, ProviderConfig};
use nrs_core::model::{load_checkpoint, CheckpointMeta, ModelError, ScorerParams};
use nrs_core::select::{select_best, ScoredCandidate, SelectError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: ModelError },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_timeout_ms() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEndpoint {
    pub id: String,
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub checkpoint: PathBuf,
    /// Overrides the provider recorded in the checkpoint.
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub agents: Vec<AgentEndpoint>,
    /// History utterances kept per request; defaults to the model window.
    #[serde(default)]
    pub max_history: Option<usize>,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServeError> {
        self.listen
            .parse::<SocketAddr>()
            .map_err(|e| ServeError::Config(format!("listen address {:?}: {e}", self.listen)))?;
        let mut seen = std::collections::HashSet::new();
        for a in &self.agents {
            if !seen.insert(a.id.as_str()) {
                return Err(ServeError::Config(format!("duplicate agent id {:?}", a.id)));
            }
            if a.timeout_ms == 0 {
                return Err(ServeError::Config(format!("agent {:?}: timeout_ms must be positive", a.id)));
            }
        }
        Ok(())
    }
}

/// Everything needed to score one request.
pub struct Snapshot {
    pub params: ScorerParams,
    pub meta: CheckpointMeta,
    pub featurizer: Featurizer,
}

impl Snapshot {
    pub fn load(config: &ServiceConfig) -> Result<Self, ServeError> {
        if !config.checkpoint.is_file() {
            return Err(ServeError::Config(format!(
                "checkpoint {} does not exist",
                config.checkpoint.display()
            )));
        }
        let (params, meta) = load_checkpoint(&config.checkpoint).map_err(|source| ServeError::Checkpoint {
            path: config.checkpoint.clone(),
            source,
        })?;
        let provider_cfg = config
            .provider
            .clone()
            .or_else(|| meta.provider.clone())
            .ok_or_else(|| ServeError::Config("no embedding provider configured or recorded in checkpoint".into()))?;
        if provider_cfg.dim() != meta.k {
            return Err(ServeError::Config(format!(
                "provider dimension {} does not match checkpoint k={}",
                provider_cfg.dim(),
                meta.k
            )));
        }
        let featurizer = Featurizer::new(provider_cfg.build()?, meta.pooling, meta.window);
        Ok(Self { params, meta, featurizer })
    }

    /// Scores candidates against the trailing `max_history` utterances.
    pub fn score(
        &self,
        history: &[Utterance],
        max_history: usize,
        query: &str,
        candidates: &[Candidate],
    ) -> Result<(usize, Vec<f64>), SelectError> {
        let start = history.len().saturating_sub(max_history);
        let context: Vec<String> = history[start..].iter().map(|u| u.text.clone()).collect();
        let sel = select_best(&self.params, &self.featurizer, &context, query, candidates)?;
        Ok((sel.index, sel.scores))
    }
}

pub struct AppState {
    config: ServiceConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    client: reqwest::Client,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self, ServeError> {
        config.validate()?;
        let snapshot = Snapshot::load(&config)?;
        Ok(Self {
            config,
            snapshot: RwLock::new(Arc::new(snapshot)),
            client: reqwest::Client::new(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Re-reads the checkpoint; the old snapshot stays live on failure.
    pub fn reload(&self) -> Result<(), ServeError> {
        let fresh = Arc::new(Snapshot::load(&self.config)?);
        *self.snapshot.write().expect("snapshot lock poisoned") = fresh;
        Ok(())
    }

    fn max_history(&self, snap: &Snapshot) -> usize {
        self.config.max_history.unwrap_or(snap.meta.window)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectRequest {
    #[serde(default)]
    pub history: Vec<Utterance>,
    pub query: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConverseRequest {
    #[serde(default)]
    pub history: Vec<Utterance>,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectResponse {
    pub selected: Candidate,
    pub scores: Vec<ScoredCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct AgentReply {
    text: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    log::error!("request failed: {e}");
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal error".into())
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))
}

fn respond(
    state: &AppState,
    history: &[Utterance],
    query: &str,
    candidates: Vec<Candidate>,
    failed: Option<Vec<String>>,
) -> Result<Json<SelectResponse>, ApiError> {
    let snap = state.snapshot();
    let (index, scores) = snap
        .score(history, state.max_history(&snap), query, &candidates)
        .map_err(internal)?;
    let scores = candidates
        .iter()
        .zip(scores)
        .map(|(c, score)| ScoredCandidate {
            agent: c.agent_id.clone(),
            score,
        })
        .collect();
    Ok(Json(SelectResponse {
        selected: candidates[index].clone(),
        scores,
        failed,
    }))
}

async fn select(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SelectResponse>, ApiError> {
    let req: SelectRequest = parse(&body)?;
    if req.candidates.is_empty() {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "candidates must not be empty".into()));
    }
    respond(&state, &req.history, &req.query, req.candidates, None)
}

async fn ask_agent(
    client: &reqwest::Client,
    agent: &AgentEndpoint,
    req: &ConverseRequest,
) -> Result<String, String> {
    let call = async {
        let resp = client.post(&agent.url).json(req).send().await.map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        resp.json::<AgentReply>().await.map(|r| r.text).map_err(|e| e.to_string())
    };
    match tokio::time::timeout(Duration::from_millis(agent.timeout_ms), call).await {
        Ok(r) => r,
        Err(_) => Err(format!("timed out after {} ms", agent.timeout_ms)),
    }
}

async fn converse(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SelectResponse>, ApiError> {
    let req: ConverseRequest = parse(&body)?;
    let agents = &state.config.agents;
    let replies = futures::future::join_all(agents.iter().map(|a| ask_agent(&state.client, a, &req))).await;
    let mut candidates = Vec::new();
    let mut failed = Vec::new();
    for (agent, reply) in agents.iter().zip(replies) {
        match reply {
            Ok(text) => candidates.push(Candidate::new(agent.id.clone(), text)),
            Err(e) => {
                log::warn!("agent {} failed: {e}", agent.id);
                failed.push(agent.id.clone());
            }
        }
    }
    if candidates.is_empty() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "no agent produced a response".into()));
    }
    respond(&state, &req.history, &req.query, candidates, Some(failed))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let snap = state.snapshot();
    Json(json!({ "status": "ok", "checkpoint": snap.meta }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/select", post(select))
        .route("/v1/converse", post(converse))
        .route("/v1/health", get(health))
        .with_state(state)
}

#[cfg(unix)]
async fn reload_on_hangup(state: Arc<AppState>) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hup) = signal(SignalKind::hangup()) else {
        log::warn!("cannot install SIGHUP handler; reload disabled");
        return;
    };
    while hup.recv().await.is_some() {
        match state.reload() {
            Ok(()) => log::info!("reloaded {}", state.config.checkpoint.display()),
            Err(e) => log::error!("reload failed, keeping previous snapshot: {e}"),
        }
    }
}

/// Binds and serves until Ctrl-C. SIGHUP reloads the checkpoint.
pub async fn run(config: ServiceConfig) -> Result<(), ServeError> {
    let state = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(&state.config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    #[cfg(unix)]
    tokio::spawn(reload_on_hangup(state.clone()));
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
