//! JSON-over-HTTP front end. Handlers hand the blocking core calls to the
//! tokio blocking pool.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use loom_core::graph::SelfReportKind;
use loom_core::service::ServiceError;
use loom_core::{ConversationId, CourseId, Loom, ProposalId, ProposalStatus, Trigger};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub fn router(loom: Arc<Loom>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/chats", post(create_chat).get(list_chats))
        .route("/chats/{id}", get(get_chat))
        .route("/chats/{id}/messages", post(post_message))
        .route("/pipeline/run", post(run_pipeline))
        .route("/runs", get(list_runs))
        .route("/proposals", get(list_proposals))
        .route("/proposals/{id}/accept", post(accept_proposal))
        .route("/proposals/{id}/dismiss", post(dismiss_proposal))
        .route("/courses", get(list_courses))
        .route("/courses/{id}", get(get_course))
        .route("/courses/{id}/modules/{index}/quiz", post(submit_quiz))
        .route(
            "/courses/{id}/modules/{index}/self-report",
            post(self_report),
        )
        .route("/graph", get(graph))
        .route("/goals", post(seed_goal))
        .route("/import", post(import))
        .with_state(loom)
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": {"code": code, "message": message.into()}}),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "invalid_input"
        | "invalid_message"
        | "unparseable_document"
        | "answer_count_mismatch"
        | "module_index_out_of_range" => StatusCode::UNPROCESSABLE_ENTITY,
        "unknown_proposal" | "unknown_course" | "unknown_conversation" => StatusCode::NOT_FOUND,
        "invalid_proposal_status"
        | "illegal_transition"
        | "duplicate_goal_label"
        | "missing_source" => StatusCode::CONFLICT,
        "assistant_failed" | "agent_failure" | "validation_exhausted" => StatusCode::BAD_GATEWAY,
        "busy" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<ServiceError> for ApiError {
    fn from(error: ServiceError) -> Self {
        let code = error.code();
        let mut body = json!({"error": {"code": code, "message": error.to_string()}});
        if let ServiceError::ChatTurnFailed {
            conversation_id, ..
        } = &error
        {
            body["conversation_id"] = json!(conversation_id);
        }
        Self {
            status: status_for(code),
            body,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

async fn blocking<T, F>(loom: Arc<Loom>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Loom) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&loom))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn ok(value: impl serde::Serialize) -> ApiResult {
    Ok(Json(value).into_response())
}

fn created(value: impl serde::Serialize) -> ApiResult {
    Ok((StatusCode::CREATED, Json(value)).into_response())
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
}

async fn health() -> ApiResult {
    ok(json!({"status": "ok"}))
}

#[derive(Debug, Default, Deserialize)]
struct NewChat {
    #[serde(default)]
    title: Option<String>,
    /// When present, the first user message; the reply is returned.
    #[serde(default)]
    text: Option<String>,
}

async fn create_chat(State(loom): State<Arc<Loom>>, body: Option<Json<NewChat>>) -> ApiResult {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    match body.text {
        Some(text) => created(blocking(loom, move |l| l.chat_turn(None, &text)).await?),
        None => {
            let title = body.title.unwrap_or_default();
            created(blocking(loom, move |l| l.create_conversation(&title)).await?)
        }
    }
}

async fn list_chats(State(loom): State<Arc<Loom>>) -> ApiResult {
    ok(loom.chat_listing())
}

async fn get_chat(State(loom): State<Arc<Loom>>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(loom, move |l| l.open_conversation(&ConversationId(id))).await?)
}

#[derive(Debug, Deserialize)]
struct NewMessage {
    text: String,
}

async fn post_message(
    State(loom): State<Arc<Loom>>,
    Path(id): Path<String>,
    Json(body): Json<NewMessage>,
) -> ApiResult {
    ok(blocking(loom, move |l| {
        l.chat_turn(Some(&ConversationId(id)), &body.text)
    })
    .await?)
}

#[derive(Debug, Default, Deserialize)]
struct RunRequest {
    #[serde(default)]
    trigger: Option<Trigger>,
}

async fn run_pipeline(State(loom): State<Arc<Loom>>, body: Option<Json<RunRequest>>) -> ApiResult {
    let trigger = body
        .and_then(|Json(b)| b.trigger)
        .unwrap_or(Trigger::Manual);
    ok(blocking(loom, move |l| Ok(l.run_pipeline(trigger))).await?)
}

async fn list_runs(State(loom): State<Arc<Loom>>) -> ApiResult {
    ok(loom.runs())
}

#[derive(Debug, Deserialize)]
struct ProposalFilter {
    #[serde(default)]
    status: Option<ProposalStatus>,
}

async fn list_proposals(
    State(loom): State<Arc<Loom>>,
    Query(filter): Query<ProposalFilter>,
) -> ApiResult {
    let proposals: Vec<_> = loom
        .list_proposals()
        .into_iter()
        .filter(|p| filter.status.is_none_or(|s| p.status == s))
        .collect();
    ok(proposals)
}

async fn accept_proposal(
    State(loom): State<Arc<Loom>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult {
    let key = idempotency_key(&headers);
    ok(blocking(loom, move |l| {
        l.accept_proposal(&ProposalId(id), key.as_deref())
    })
    .await?)
}

async fn dismiss_proposal(State(loom): State<Arc<Loom>>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(loom, move |l| l.dismiss_proposal(&ProposalId(id))).await?)
}

async fn list_courses(State(loom): State<Arc<Loom>>) -> ApiResult {
    let courses: Vec<Value> = loom
        .list_courses()
        .into_iter()
        .map(|c| json!({"id": c.id, "title": c.title, "goal_label": c.goal_label, "modules": c.modules.len()}))
        .collect();
    ok(courses)
}

async fn get_course(State(loom): State<Arc<Loom>>, Path(id): Path<String>) -> ApiResult {
    let id = CourseId(id);
    let course = loom
        .course(&id)
        .ok_or_else(|| ApiError::not_found("course"))?;
    ok(json!({"course": course, "progress": loom.course_view(&id)}))
}

#[derive(Debug, Deserialize)]
struct QuizSubmission {
    answers: Vec<usize>,
}

async fn submit_quiz(
    State(loom): State<Arc<Loom>>,
    Path((id, index)): Path<(String, usize)>,
    headers: HeaderMap,
    Json(body): Json<QuizSubmission>,
) -> ApiResult {
    let key = idempotency_key(&headers);
    ok(blocking(loom, move |l| {
        l.submit_quiz(&CourseId(id), index, &body.answers, key.as_deref())
    })
    .await?)
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfReportRequest {
    Known,
    Irrelevant,
    Unmark,
}

#[derive(Debug, Deserialize)]
struct SelfReportBody {
    kind: SelfReportRequest,
}

async fn self_report(
    State(loom): State<Arc<Loom>>,
    Path((id, index)): Path<(String, usize)>,
    Json(body): Json<SelfReportBody>,
) -> ApiResult {
    let id = CourseId(id);
    ok(blocking(loom, move |l| match body.kind {
        SelfReportRequest::Known => l.self_report(&id, index, SelfReportKind::Known),
        SelfReportRequest::Irrelevant => l.self_report(&id, index, SelfReportKind::Irrelevant),
        SelfReportRequest::Unmark => l.unmark_self_report(&id, index),
    })
    .await?)
}

async fn graph(State(loom): State<Arc<Loom>>) -> ApiResult {
    ok(loom.graph_view())
}

#[derive(Debug, Deserialize)]
struct NewGoal {
    label: String,
}

async fn seed_goal(State(loom): State<Arc<Loom>>, Json(body): Json<NewGoal>) -> ApiResult {
    let label = body.label.clone();
    let id = blocking(loom, move |l| l.seed_goal(&label)).await?;
    created(json!({"goal_id": id, "label": body.label.trim()}))
}

async fn import(State(loom): State<Arc<Loom>>, body: String) -> ApiResult {
    ok(blocking(loom, move |l| l.import_conversations(&body)).await?)
}
