//! JSON HTTP API over an [`Engine`].
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/v1/leaks?since&domain&pii&offset&limit&all` | | page of predictions, newest first |
//! | GET | `/v1/predictions/{id}` | | one prediction |
//! | POST | `/v1/labels` | label submission | receipt with backfill count |
//! | GET | `/v1/rules` | | rules |
//! | POST | `/v1/rules` | rule | created rule (201) |
//! | PATCH | `/v1/rules/{id}` | partial rule | updated rule |
//! | DELETE | `/v1/rules/{id}` | | 204 |
//! | POST | `/v1/retrain` | | retrain report |
//! | GET | `/v1/metrics` | | counters, latency, latest evaluation |
//! | GET | `/v1/models` | | model versions |
//! | POST | `/v1/flows` | flow record or array of them | prediction, or one result per record |
//! | GET | `/health` | | `{"status":"ok"}` |
//!
//! Errors are `{"error": {"kind", "message", "fields"?}}`. When the config
//! sets `api_token`, every `/v1` request needs `Authorization: Bearer <token>`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{rejection::QueryRejection, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use leakwatch_core::engine::{Engine, EngineConfig, IngestItem, LabelSubmission, LeakQuery, RulePatch};
use leakwatch_core::{Error, RewriteRule};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
    fields: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError { status, kind: kind.to_string(), message: message.into(), fields: Vec::new() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownPrediction(_) | Error::UnknownRule(_) | Error::UnknownFlow(_) => StatusCode::NOT_FOUND,
            Error::InvalidRule(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::DuplicateRule(_) => StatusCode::CONFLICT,
            Error::InvalidQuery(_) | Error::Label(_) | Error::FlowField { .. } | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let fields = match &e {
            Error::InvalidRule(f) => f.clone(),
            _ => Vec::new(),
        };
        ApiError { status, kind: e.kind().to_string(), message: e.to_string(), fields }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "kind": self.kind, "message": self.message });
        if !self.fields.is_empty() {
            err["fields"] = json!(self.fields);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "json", e.to_string()))
}

/// Runs a slow engine call off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

async fn leaks(State(engine): State<Arc<Engine>>, q: Result<Query<LeakQuery>, QueryRejection>) -> ApiResult<Response> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_query", e.body_text()))?;
    Ok(Json(engine.leaks(&q)?).into_response())
}

async fn prediction(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = engine.prediction(&id).ok_or(Error::UnknownPrediction(id))?;
    Ok(Json(p).into_response())
}

async fn labels(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<Response> {
    let sub: LabelSubmission = parse(&body)?;
    Ok(Json(engine.submit_label(sub)?).into_response())
}

async fn list_rules(State(engine): State<Arc<Engine>>) -> Json<Vec<RewriteRule>> {
    Json(engine.rules())
}

async fn create_rule(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<Response> {
    let rule: RewriteRule = parse(&body)?;
    Ok((StatusCode::CREATED, Json(engine.add_rule(rule)?)).into_response())
}

async fn update_rule(State(engine): State<Arc<Engine>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let p: RulePatch = parse(&body)?;
    Ok(Json(engine.patch_rule(&id, p)?).into_response())
}

async fn delete_rule(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    engine.delete_rule(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn retrain(State(engine): State<Arc<Engine>>) -> ApiResult<Response> {
    let report = blocking(move || engine.retrain()).await??;
    Ok(Json(report).into_response())
}

async fn metrics(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.metrics()).into_response()
}

async fn models(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.models()).into_response()
}

/// One record gets its prediction back (or its error status); an array
/// gets one result per record, malformed ones included.
async fn flows(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<Response> {
    match parse::<Value>(&body)? {
        Value::Array(records) => {
            let items = blocking(move || engine.ingest_records(records)).await?;
            Ok(Json(items).into_response())
        }
        record @ Value::Object(_) => match blocking(move || engine.ingest_records(vec![record])).await?.pop() {
            Some(IngestItem::Ok(p)) => Ok(Json(p).into_response()),
            Some(IngestItem::Error(e)) => {
                let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::BAD_REQUEST);
                Err(ApiError::new(status, &e.kind, e.message))
            }
            None => Err(ApiError::bad_request("empty ingest result")),
        },
        _ => Err(ApiError::bad_request("expected a flow record or an array of them")),
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn require_token(State(token): State<Arc<str>>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(&*token) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response()
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    let token = engine.config().api_token.clone().filter(|t| !t.is_empty());
    let mut api = Router::new()
        .route("/v1/leaks", get(leaks))
        .route("/v1/predictions/{id}", get(prediction))
        .route("/v1/labels", post(labels))
        .route("/v1/rules", get(list_rules).post(create_rule))
        .route("/v1/rules/{id}", patch(update_rule).delete(delete_rule))
        .route("/v1/retrain", post(retrain))
        .route("/v1/metrics", get(metrics))
        .route("/v1/models", get(models))
        .route("/v1/flows", post(flows));
    if let Some(t) = token {
        api = api.layer(middleware::from_fn_with_state(Arc::<str>::from(t), require_token));
    }
    api.route("/health", get(health)).with_state(engine)
}

/// Retrains every `period`, first after one period has passed.
pub fn spawn_retrain_schedule(engine: Arc<Engine>, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
        loop {
            tick.tick().await;
            let e = engine.clone();
            match tokio::task::spawn_blocking(move || e.retrain()).await {
                Ok(Ok(r)) if r.retrained => log::info!("scheduled retrain: generation {}", r.generation),
                Ok(Ok(_)) => log::debug!("scheduled retrain: nothing pending"),
                Ok(Err(e)) => log::warn!("scheduled retrain failed: {e}"),
                Err(e) => log::warn!("scheduled retrain panicked: {e}"),
            }
        }
    })
}

/// Opens the engine and serves until interrupted.
pub async fn serve(config: EngineConfig) -> Result<(), CliError> {
    let listen = config.listen.clone();
    let period = config.retrain_schedule.period();
    let engine = tokio::task::spawn_blocking(move || Engine::open(config))
        .await
        .map_err(|e| CliError::new("internal", e.to_string()))??;
    let engine = Arc::new(engine);
    if let Some(p) = period {
        spawn_retrain_schedule(engine.clone(), p);
    }
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_core_errors_to_statuses() {
        let cases = [
            (Error::UnknownPrediction("p".into()), StatusCode::NOT_FOUND),
            (Error::UnknownRule("r".into()), StatusCode::NOT_FOUND),
            (Error::InvalidRule(vec!["scope: empty".into()]), StatusCode::UNPROCESSABLE_ENTITY),
            (Error::DuplicateRule("r1".into()), StatusCode::CONFLICT),
            (Error::InvalidQuery("limit".into()), StatusCode::BAD_REQUEST),
        ];
        for (e, status) in cases {
            assert_eq!(ApiError::from(e).status, status);
        }
        assert_eq!(ApiError::from(Error::InvalidRule(vec!["a".into()])).fields, ["a"]);
    }
}
