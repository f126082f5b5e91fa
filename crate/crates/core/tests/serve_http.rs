use std::sync::Arc;

use earlyexit_core::lite::{Budgets, ExitSchedule, WeightSchedule};
use earlyexit_core::model::{Checkpoint, CheckpointKind, ModelConfig, Transformer};
use earlyexit_core::ppo::{DenseLayer, PolicyArtifact, POLICY_ARTIFACT_FORMAT, POLICY_FORMAT_VERSION};
use earlyexit_core::ppo::Activation;
use earlyexit_core::serve::{spawn, CompletionResponse, ServiceConfig, ServiceState};
use serde_json::{json, Value};

const D: usize = 16;

fn checkpoint() -> Checkpoint {
    let model = Transformer::new(ModelConfig {
        n_layers: 6,
        d_model: D,
        n_heads: 2,
        ffn_mult: 2,
        max_seq: 96,
        vocab_size: 259,
        seed: 3,
    })
    .unwrap();
    let schedule = ExitSchedule::build(6, 2, 1, 1).unwrap();
    let weights = WeightSchedule::build(&schedule, Budgets::default(), 0.9).unwrap();
    Checkpoint { kind: CheckpointKind::Lite, model, schedule, weights }
}

/// Input-independent policy with exit probability 0.75.
fn constant_policy() -> PolicyArtifact {
    PolicyArtifact {
        format: POLICY_ARTIFACT_FORMAT.into(),
        format_version: POLICY_FORMAT_VERSION,
        input_dim: D,
        actions: vec!["continue".into(), "exit".into()],
        layers: vec![DenseLayer {
            input: D,
            output: 2,
            activation: Activation::Identity,
            weights: vec![0.0; 2 * D],
            bias: vec![0.0, 3f64.ln()],
        }],
    }
}

async fn server() -> (String, Arc<Checkpoint>) {
    let ck = checkpoint();
    let keep = Arc::new(ck.clone());
    let st = ServiceState::new(ck, &constant_policy(), ServiceConfig::default()).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = spawn(st, listener).await.unwrap();
    (format!("http://{addr}"), keep)
}

async fn post(base: &str, body: String) -> (u16, Value) {
    let r = reqwest::Client::new()
        .post(format!("{base}/generate"))
        .header("content-type", "application/json")
        .body(body)
        .send()
        .await
        .unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap())
}

#[tokio::test]
async fn health_reports_checkpoint_schedule() {
    let (base, ck) = server().await;
    let h: Value = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h["status"], "ok");
    let sched: Vec<usize> = serde_json::from_value(h["schedule"].clone()).unwrap();
    assert_eq!(sched, ck.schedule.layers());
    assert!(h["model_id"].as_str().unwrap().starts_with("lite-6x16"));
    assert!(h["policy_id"].as_str().is_some());
}

#[tokio::test]
async fn generate_response_is_consistent() {
    let (base, _) = server().await;
    let (status, v) = post(&base, json!({"inputs": "def add(a, b):\n    ", "parameters": {"max_new_tokens": 8}}).to_string()).await;
    assert_eq!(status, 200);
    let resp: CompletionResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.meta.exit_threshold, 0.9);
    assert_eq!(resp.meta.per_token_exit_layers.len(), resp.meta.generated_tokens);
    assert!(resp.meta.generated_tokens >= 1 && resp.meta.generated_tokens <= 8);
    let sum: usize = resp.meta.per_token_exit_layers.iter().sum();
    assert_eq!(resp.meta.layers_executed_total, sum as u64);
    assert!(resp.meta.latency_ms >= 0.0 && resp.meta.energy_proxy > 0.0);
}

#[tokio::test]
async fn threshold_override_changes_depth() {
    let (base, _) = server().await;
    let req = |t: f64| json!({"inputs": "for item in items:\n", "parameters": {"exit_threshold": t}}).to_string();
    let (_, low) = post(&base, req(0.6)).await;
    let (_, high) = post(&base, req(0.92)).await;
    let layers = |v: &Value| v["meta"]["layers_executed_total"].as_u64().unwrap();
    let tokens = |v: &Value| v["meta"]["generated_tokens"].as_u64().unwrap();
    // p_exit = 0.75: exit at the first point under 0.6, run to the end under 0.92
    assert_eq!(layers(&low), 2 * tokens(&low));
    assert_eq!(layers(&high), 6 * tokens(&high));
    assert_eq!(low["meta"]["exit_threshold"], 0.6);
}

#[tokio::test]
async fn bad_requests_get_400() {
    let (base, _) = server().await;
    let (s, v) = post(&base, json!({"inputs": ""}).to_string()).await;
    assert_eq!(s, 400);
    assert_eq!(v["error"], "empty input");
    let (s, v) = post(&base, "{not json".into()).await;
    assert_eq!(s, 400);
    assert!(v["error"].as_str().unwrap().contains("malformed"));
    let (s, _) = post(&base, json!({"inputs": "x", "parameters": {"max_new_tokens": 0}}).to_string()).await;
    assert_eq!(s, 400);
}

#[tokio::test]
async fn identical_requests_identical_responses() {
    let (base, _) = server().await;
    let body = json!({"inputs": "class Cache:\n", "parameters": {"exit_threshold": 0.7}}).to_string();
    let (_, a) = post(&base, body.clone()).await;
    let (_, b) = post(&base, body).await;
    assert_eq!(a["generated_text"], b["generated_text"]);
    assert_eq!(a["meta"]["per_token_exit_layers"], b["meta"]["per_token_exit_layers"]);
}
