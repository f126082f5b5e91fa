//! HTTP completion endpoint: `POST /generate` and `GET /health`.
//!
//! Requests carry an optional per-request exit threshold. Generation runs on
//! the blocking pool; requests past `max_concurrent` are rejected with 429.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::controller::{self, ControllerConfig};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::evalkit::EnergyCosts;
use crate::lite::ExitSchedule;
use crate::model::{Checkpoint, Transformer};
use crate::ppo::{ExitPolicy, PolicyArtifact};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub checkpoint: PathBuf,
    pub policy: PathBuf,
    pub default_threshold: f64,
    pub request_timeout_secs: f64,
    pub max_concurrent: usize,
    pub default_max_new_tokens: usize,
    pub kv_cache: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: PathBuf::from("artifacts/lite.ckpt"),
            policy: PathBuf::from("artifacts/policy.json"),
            default_threshold: 0.9,
            request_timeout_secs: 30.0,
            max_concurrent: 4,
            default_max_new_tokens: 15,
            kv_cache: false,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.default_threshold > 0.0 && self.default_threshold < 1.0) {
            return Err(Error::config(format!(
                "default_threshold {} outside (0, 1)",
                self.default_threshold
            )));
        }
        if self.max_concurrent == 0 || self.default_max_new_tokens == 0 {
            return Err(Error::config("max_concurrent and default_max_new_tokens must be ≥ 1"));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(Error::config("request_timeout_secs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub max_new_tokens: Option<usize>,
    pub exit_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRequest {
    pub inputs: String,
    #[serde(default)]
    pub parameters: Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionMeta {
    pub request_id: String,
    pub exit_threshold: f64,
    pub generated_tokens: usize,
    pub per_token_exit_layers: Vec<usize>,
    pub layers_executed_total: u64,
    pub energy_proxy: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub generated_text: String,
    pub meta: CompletionMeta,
}

/// Model, schedule and policy shared read-only by every request.
pub struct ServiceState {
    model: Transformer,
    schedule: ExitSchedule,
    policy: ExitPolicy,
    cfg: ServiceConfig,
    permits: Arc<Semaphore>,
    next_id: AtomicU64,
    model_id: String,
    policy_id: String,
}

fn fingerprint(values: impl Iterator<Item = f64>) -> String {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

impl ServiceState {
    pub fn new(ck: Checkpoint, policy: &PolicyArtifact, cfg: ServiceConfig) -> Result<Self> {
        cfg.validate()?;
        if policy.input_dim != ck.model.d_model() {
            return Err(Error::DimensionMismatch {
                expected: ck.model.d_model(),
                got: policy.input_dim,
            });
        }
        let model_id = format!(
            "{:?}-{}x{}-{}",
            ck.kind,
            ck.model.n_layers(),
            ck.model.d_model(),
            fingerprint(ck.model.params().iter().copied())
        )
        .to_lowercase();
        let policy_id = format!(
            "policy-v{}-{}",
            policy.format_version,
            fingerprint(policy.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied())
        );
        Ok(Self {
            policy: ExitPolicy::from_artifact(policy)?,
            model: ck.model,
            schedule: ck.schedule,
            permits: Arc::new(Semaphore::new(cfg.max_concurrent)),
            cfg,
            next_id: AtomicU64::new(1),
            model_id,
            policy_id,
        })
    }

    pub fn load(cfg: ServiceConfig) -> Result<Self> {
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        let policy = PolicyArtifact::load(&cfg.policy)?;
        Self::new(ck, &policy, cfg)
    }

    fn generate(&self, req: &CompletionRequest, request_id: String) -> Result<CompletionResponse> {
        let threshold = req
            .parameters
            .exit_threshold
            .unwrap_or(self.cfg.default_threshold)
            .clamp(1e-6, 1.0 - 1e-6);
        let max_new = req.parameters.max_new_tokens.unwrap_or(self.cfg.default_max_new_tokens);
        let mut ids = Tokenizer.encode(req.inputs.as_bytes());
        // keep the rightmost context that fits alongside the completion
        let room = self.model.config().max_seq + 1 - max_new;
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        let ccfg = ControllerConfig {
            threshold,
            max_new,
            kv_cache: self.cfg.kv_cache,
            ..Default::default()
        };
        let start = Instant::now();
        let r = controller::generate_with_costs(
            &self.model,
            &self.schedule,
            &self.policy,
            &ids,
            &ccfg,
            &EnergyCosts::default(),
        )?;
        Ok(CompletionResponse {
            generated_text: Tokenizer.decode_lossy(&r.token_ids),
            meta: CompletionMeta {
                request_id,
                exit_threshold: threshold,
                generated_tokens: r.token_ids.len(),
                per_token_exit_layers: r.per_token_exit_layer,
                layers_executed_total: r.layers_executed_total,
                energy_proxy: r.energy_proxy,
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
            },
        })
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_id": state.model_id,
        "policy_id": state.policy_id,
        "n_layers": state.model.n_layers(),
        "d_model": state.model.d_model(),
        "schedule": state.schedule.layers(),
        "default_threshold": state.cfg.default_threshold,
    }))
}

async fn generate(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let id = format!("req-{:06}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let req: CompletionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if req.inputs.is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty input");
    }
    let max_new = req.parameters.max_new_tokens.unwrap_or(state.cfg.default_max_new_tokens);
    if max_new == 0 || max_new > state.model.config().max_seq {
        return error(
            StatusCode::BAD_REQUEST,
            format!("max_new_tokens must be in 1..={}", state.model.config().max_seq),
        );
    }
    if let Some(t) = req.parameters.exit_threshold {
        if !t.is_finite() {
            return error(StatusCode::BAD_REQUEST, "exit_threshold must be finite");
        }
    }
    let Ok(permit) = state.permits.clone().try_acquire_owned() else {
        return error(StatusCode::TOO_MANY_REQUESTS, "too many concurrent requests");
    };
    let timeout = Duration::from_secs_f64(state.cfg.request_timeout_secs);
    let worker = state.clone();
    let rid = id.clone();
    let job = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        worker.generate(&req, rid)
    });
    match tokio::time::timeout(timeout, job).await {
        Ok(Ok(Ok(resp))) => {
            tracing::info!(
                request_id = %id,
                threshold = resp.meta.exit_threshold,
                layers = resp.meta.layers_executed_total,
                tokens = resp.meta.generated_tokens,
                latency_ms = resp.meta.latency_ms,
                "generate"
            );
            Json(resp).into_response()
        }
        Ok(Ok(Err(e))) => {
            tracing::error!(request_id = %id, error = %e, "generation failed");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({ "error": "internal error", "id": id })),
            )
                .into_response()
        }
        Ok(Err(join)) => {
            tracing::error!(request_id = %id, error = %join, "generation task panicked");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({ "error": "internal error", "id": id })),
            )
                .into_response()
        }
        Err(_) => {
            tracing::warn!(request_id = %id, "request timed out");
            error(StatusCode::GATEWAY_TIMEOUT, "generation timed out")
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/generate", post(generate))
        .with_state(state)
}

/// Binds `cfg.bind` and serves until the process is stopped.
pub async fn run(cfg: ServiceConfig) -> Result<()> {
    let bind = cfg.bind.clone();
    let state = Arc::new(ServiceState::load(cfg)?);
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| Error::config(format!("bad bind address {bind:?}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(addr = %addr, "listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::config(format!("server error: {e}")))
}

/// Serves on an already-bound listener; returns the bound address.
pub async fn spawn(state: ServiceState, listener: tokio::net::TcpListener) -> Result<SocketAddr> {
    let addr = listener
        .local_addr()
        .map_err(|e| Error::config(format!("listener has no address: {e}")))?;
    let app = router(Arc::new(state));
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(addr)
}
