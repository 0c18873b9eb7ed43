//! HTTP routing.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::api::{
    parse_body, ApiError, CreateSessionRequest, Health, QueryDescriptor, RatingRequest,
    RecommendationView, SessionView,
};
use crate::session::SessionManager;

type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    let cors = match &manager.config().cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(value) => CorsLayer::new().allow_origin(value),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {origin:?}");
                CorsLayer::new().allow_origin(Any)
            }
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods([Method::GET, Method::POST])
    .allow_headers(Any);

    let static_dir = manager.config().static_dir.clone();
    let api = Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/next", get(next_query))
        .route("/sessions/{id}/rating", post(submit_rating))
        .route("/sessions/{id}/recommendation", get(recommendation))
        .with_state(manager);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("no such endpoint") }),
    };
    app.layer(cors)
}

/// Runs blocking manager calls off the async executor.
async fn blocking<T, F>(manager: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&manager))
        .await
        .map_err(|e| ApiError::internal(format!("request task failed: {e}")))?
}

async fn health(State(manager): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        apps: manager.dataset().apps.len(),
        sessions: manager.session_count(),
    })
}

async fn create_session(
    State(manager): State<Shared>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSessionRequest = parse_body(&body)?;
    let view = blocking(manager, move |m| {
        m.create(&req.app_id, req.spec, req.budget, req.seed)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn session(
    State(manager): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    manager.view(&id).map(Json)
}

async fn next_query(
    State(manager): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<QueryDescriptor>, ApiError> {
    manager.next_query(&id).map(Json)
}

async fn submit_rating(
    State(manager): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let req: RatingRequest = parse_body(&body)?;
    blocking(manager, move |m| m.submit(&id, &req.reduction_id, req.rating))
        .await
        .map(Json)
}

async fn recommendation(
    State(manager): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<RecommendationView>, ApiError> {
    manager.recommendation(&id).map(Json)
}
