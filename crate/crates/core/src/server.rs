//! HTTP JSON API under `/api/v1`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::ingest::{parse_cell, RawRecord};
use crate::service::{Engine, RequestError, DEFAULT_EXPLAIN_BUDGET, DISCLAIMER};

#[derive(Debug, Serialize)]
struct Detail {
    field: String,
    reason: String,
}

#[derive(Debug, Serialize)]
struct ApiError {
    code: &'static str,
    message: String,
    details: Vec<Detail>,
}

fn error(status: StatusCode, code: &'static str, message: impl Into<String>, details: Vec<Detail>) -> Response {
    (status, Json(ApiError { code, message: message.into(), details })).into_response()
}

fn bad_request(message: impl Into<String>) -> Response {
    error(StatusCode::BAD_REQUEST, "bad_request", message, Vec::new())
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        match self {
            RequestError::Rejected(rej) => error(
                StatusCode::UNPROCESSABLE_ENTITY,
                "failed_cleaning",
                "one or more answers failed validation",
                rej.into_iter().map(|r| Detail { field: r.feature_id, reason: r.reason.to_string() }).collect(),
            ),
            RequestError::UnknownDisease(d) => error(StatusCode::NOT_FOUND, "unknown_disease", format!("no model for {d}"), Vec::new()),
            RequestError::Invalid(m) => bad_request(m),
            RequestError::Internal(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), Vec::new()),
        }
    }
}

/// Parse a flat `{feature_id: value}` object. Values may be numbers, numeric
/// strings, or null/"" for an empty answer.
pub fn parse_answers(body: &[u8]) -> std::result::Result<RawRecord, String> {
    let value: Value = serde_json::from_slice(body).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("request body must be a JSON object of feature id to raw value".into());
    };
    let mut raw = RawRecord::new();
    for (k, v) in map {
        let cell = match &v {
            Value::Null => None,
            Value::Number(n) => Some(n.as_f64().ok_or_else(|| format!("{k}: number out of range"))?),
            Value::String(s) if s.trim().is_empty() => None,
            Value::String(s) => Some(parse_cell(s).ok_or_else(|| format!("{k}: '{s}' is not a number"))?),
            _ => return Err(format!("{k}: expected a number")),
        };
        raw.insert(k, cell);
    }
    Ok(raw)
}

struct AppState {
    engine: Engine,
    schema_hash: String,
}

impl AppState {
    fn versions(&self) -> Value {
        json!({
            "schema_version": self.engine.schema().version,
            "schema_hash": self.schema_hash,
            "model_format_version": FORMAT_VERSION,
        })
    }
}

type Shared = State<Arc<AppState>>;

fn with_meta(state: &AppState, mut body: Value) -> Json<Value> {
    if let Value::Object(map) = &mut body {
        map.insert("disclaimer".into(), DISCLAIMER.into());
        if let Value::Object(v) = state.versions() {
            map.extend(v);
        }
    }
    Json(body)
}

async fn health(State(s): Shared) -> Json<Value> {
    with_meta(&s, json!({ "status": "ok", "diseases": s.engine.diseases() }))
}

async fn schema(State(s): Shared) -> Json<Value> {
    let schema = s.engine.schema();
    let loaded = s.engine.diseases();
    let diseases: Vec<Value> = schema
        .labels
        .iter()
        .map(|l| json!({ "id": l.id, "display": l.display, "loaded": loaded.contains(&l.id.as_str()) }))
        .collect();
    with_meta(&s, json!({ "features": schema.features, "diseases": diseases }))
}

async fn predict(State(s): Shared, body: Bytes) -> Response {
    let raw = match parse_answers(&body) {
        Ok(r) => r,
        Err(m) => return bad_request(m),
    };
    match s.engine.predict(&raw) {
        Ok(risks) => {
            let risks: serde_json::Map<String, Value> = risks.into_iter().map(|(d, r)| (d, r.into())).collect();
            with_meta(&s, json!({ "risks": risks })).into_response()
        }
        Err(e) => e.into_response(),
    }
}

async fn explain(State(s): Shared, Query(q): Query<HashMap<String, String>>, body: Bytes) -> Response {
    let Some(disease) = q.get("disease") else {
        return bad_request("query parameter 'disease' is required");
    };
    let budget = match q.get("budget").map(|b| b.parse::<usize>()) {
        None => DEFAULT_EXPLAIN_BUDGET,
        Some(Ok(b)) => b,
        Some(Err(_)) => return bad_request("budget must be a positive integer"),
    };
    let raw = match parse_answers(&body) {
        Ok(r) => r,
        Err(m) => return bad_request(m),
    };
    // Attribution is CPU-bound; keep it off the async workers.
    let state = Arc::clone(&s);
    let disease = disease.clone();
    let outcome = tokio::task::spawn_blocking(move || state.engine.explain(&raw, &disease, budget)).await;
    match outcome {
        Ok(Ok(ex)) => match serde_json::to_value(ex) {
            Ok(v) => with_meta(&s, v).into_response(),
            Err(e) => RequestError::Internal(e.into()).into_response(),
        },
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), Vec::new()),
    }
}

async fn importance(State(s): Shared, Path(disease): Path<String>, Query(q): Query<HashMap<String, String>>) -> Response {
    let k = match q.get("k").map(|k| k.parse::<usize>()) {
        None => 3,
        Some(Ok(k)) => k,
        Some(Err(_)) => return bad_request("k must be a non-negative integer"),
    };
    match s.engine.importance(&disease, k) {
        Ok(rows) => with_meta(&s, json!({ "disease": disease, "features": rows })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such endpoint", Vec::new())
}

pub fn router(engine: Engine) -> Router {
    let schema_hash = format!("{:016x}", engine.schema().hash());
    let state = Arc::new(AppState { engine, schema_hash });
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/schema", get(schema))
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/explain", post(explain))
        .route("/api/v1/importance/{disease}", get(importance))
        .fallback(not_found)
        .with_state(state)
}

/// Bind `addr` and serve until ctrl-c.
pub async fn serve(addr: SocketAddr, engine: Engine) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| match source.kind() {
        std::io::ErrorKind::AddrInUse => Error::PortBusy { addr: addr.to_string(), source },
        _ => Error::Io(source),
    })?;
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
