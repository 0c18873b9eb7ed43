//! JSON bodies exchanged with clients.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use redopt_core::engine::ScoreEstimate;
use redopt_core::{RawRating, Reduction, ReductionKind, ResourceSavings, Specification};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub app_id: String,
    pub spec: Specification,
    pub budget: usize,
    /// Fixes the selection randomness; drawn from the OS when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRequest {
    pub reduction_id: String,
    /// Raw rating on the 1..9 scale.
    pub rating: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Selecting,
    AwaitingRating,
    Done,
    Aborted,
}

impl SessionState {
    /// Whether the state machine allows moving from `self` to `next`.
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Selecting, AwaitingRating) | (Selecting, Done) | (AwaitingRating, Selecting)
        ) || (next == Aborted && self != Done && self != Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Ratings accepted so far.
    pub answered: usize,
    /// Ratings the session will ask for.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAnchor {
    pub value: u8,
    pub label: String,
}

/// The rating scale shown next to each query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: u8,
    pub max: u8,
    pub anchors: Vec<ScaleAnchor>,
}

impl Default for RatingScale {
    fn default() -> Self {
        let anchor = |value, label: &str| ScaleAnchor {
            value,
            label: label.to_string(),
        };
        Self {
            min: RawRating::MIN,
            max: RawRating::MAX,
            anchors: vec![
                anchor(RawRating::MIN, "extremely dissatisfied"),
                anchor(RawRating::NEUTRAL, "neutral"),
                anchor(RawRating::MAX, "extremely satisfied"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionDescriptor {
    pub id: String,
    pub kind: ReductionKind,
    /// What changed relative to the original app.
    pub summary: String,
    pub views: Vec<String>,
    pub savings: ResourceSavings,
    pub asset_refs: Vec<String>,
}

impl From<&Reduction> for ReductionDescriptor {
    fn from(r: &Reduction) -> Self {
        let views = match r.views.len() {
            1 => format!("view {}", r.views[0]),
            n => format!("{n} views ({})", r.views.join(", ")),
        };
        Self {
            id: r.id.clone(),
            kind: r.kind,
            summary: format!("{} in {views}", r.kind.describe()),
            views: r.views.clone(),
            savings: r.savings,
            asset_refs: r.asset_refs.clone(),
        }
    }
}

/// Body of `GET /sessions/{id}/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDescriptor {
    pub session_id: String,
    /// One-based position of this query in the session.
    pub step: usize,
    pub reduction: ReductionDescriptor,
    pub scale: RatingScale,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsweredQuery {
    pub reduction_id: String,
    pub rating: RawRating,
    /// Normalized score in `[0, 1]`.
    pub score: f64,
}

/// Snapshot of a session, returned by every session endpoint that mutates
/// and by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub app_id: String,
    pub spec: Specification,
    pub budget: usize,
    pub state: SessionState,
    pub progress: Progress,
    pub pending: Option<QueryDescriptor>,
    pub answered: Vec<AnsweredQuery>,
    pub recommendation_id: Option<String>,
    pub error: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub reduction_id: String,
    pub kind: ReductionKind,
    pub rating: Option<RawRating>,
    pub score: f64,
}

/// Body of `GET /sessions/{id}/recommendation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationView {
    pub session_id: String,
    pub app_id: String,
    pub spec: Specification,
    pub reduction: ReductionDescriptor,
    /// Score estimate of the recommendation, observed or predicted.
    pub estimated_score: f64,
    /// `estimated_score + λ⟨α, savings⟩`.
    pub estimated_objective: f64,
    pub trace: Vec<TraceRow>,
    pub estimates: Vec<ScoreEstimate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub apps: usize,
    pub sessions: usize,
}

/// Error envelope used by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                detail: None,
            },
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.body.detail = Some(detail);
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn invalid(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn gone(message: impl Into<String>) -> Self {
        Self::new(StatusCode::GONE, "session_aborted", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Parses a JSON body, reporting the failing field.
pub fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let code = if path == "spec" || path.starts_with("spec.") {
            "invalid_spec"
        } else if path == "rating" {
            "invalid_rating"
        } else {
            "invalid_request"
        };
        ApiError::invalid(code, err.inner().to_string())
            .with_detail(serde_json::json!({ "field": path }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SessionState::*;

    #[test]
    fn allowed_transitions() {
        let all = [Selecting, AwaitingRating, Done, Aborted];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Selecting, AwaitingRating),
                (Selecting, Done),
                (Selecting, Aborted),
                (AwaitingRating, Selecting),
                (AwaitingRating, Aborted),
            ]
        );
    }

    #[test]
    fn spec_errors_are_tagged() {
        let err = parse_body::<CreateSessionRequest>(
            br#"{"app_id": "a", "spec": {"lambda": 1, "alpha": {"cpu": 0.2, "mem": 0.2, "net": 0.2}}, "budget": 1}"#,
        )
        .unwrap_err();
        assert_eq!(err.status, StatusCode::BAD_REQUEST);
        assert_eq!(err.body.code, "invalid_spec");
    }

    #[test]
    fn descriptor_summary() {
        let r = Reduction {
            id: "r".into(),
            app_id: "a".into(),
            kind: ReductionKind::ImageRemoval,
            views: vec!["main".into()],
            features: redopt_core::FeatureVector::bias_only(),
            savings: ResourceSavings::NONE,
            asset_refs: vec!["x.png".into()],
        };
        assert_eq!(ReductionDescriptor::from(&r).summary, "images removed in view main");
    }
}
