//! JSON endpoints over [`Service`].

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prefqrels_core::tasking::Side;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use crate::service::{AssessorProfile, Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            ServiceError::Excluded => (StatusCode::FORBIDDEN, "excluded"),
            ServiceError::NotQualified => (StatusCode::FORBIDDEN, "not_qualified"),
            ServiceError::EmptyAssessor => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::WrongState { .. } => (StatusCode::CONFLICT, "wrong_state"),
            ServiceError::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            ServiceError::NoTasks => (StatusCode::SERVICE_UNAVAILABLE, "no_tasks"),
            ServiceError::Log(_) | ServiceError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": code, "message": self.to_string() }))).into_response()
    }
}

fn bad_body(e: JsonRejection) -> Response {
    (e.status(), Json(json!({ "error": "bad_request", "message": e.body_text() }))).into_response()
}

#[derive(Debug, Deserialize)]
struct NewSession {
    assessor: String,
    #[serde(default)]
    profile: AssessorProfile,
}

#[derive(Debug, Deserialize)]
struct AnswerBody {
    #[serde(default)]
    pair_index: Option<usize>,
    choice: Side,
}

type Shared = State<Arc<Service>>;

async fn create_session(
    State(svc): Shared,
    body: Result<Json<NewSession>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return Ok(bad_body(e)),
    };
    let view = svc.create_session(&body.assessor, &body.profile)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.session(&id)?).into_response())
}

async fn consent(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.consent(&id)?).into_response())
}

async fn next(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.next(&id)?).into_response())
}

async fn answer(
    State(svc): Shared,
    Path(id): Path<String>,
    body: Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return Ok(bad_body(e)),
    };
    Ok(Json(svc.answer(&id, body.pair_index, body.choice)?).into_response())
}

async fn abandon(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.abandon(&id)?).into_response())
}

async fn progress(State(svc): Shared) -> Response {
    Json(svc.progress()).into_response()
}

async fn payments(State(svc): Shared) -> Response {
    Json(svc.payments()).into_response()
}

/// All routes. `cors` allows any origin, for a UI served elsewhere.
pub fn router(service: Arc<Service>, cors: bool) -> Router {
    let app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/consent", post(consent))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/admin/progress", get(progress))
        .route("/admin/payments", get(payments))
        .with_state(service);
    if cors {
        app.layer(CorsLayer::permissive())
    } else {
        app
    }
}

pub async fn serve(
    listener: TcpListener,
    service: Arc<Service>,
    cors: bool,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service, cors))
        .with_graceful_shutdown(shutdown)
        .await
}
