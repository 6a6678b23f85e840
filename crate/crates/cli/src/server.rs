//! HTTP JSON service for pairwise annotation.
//!
//! `GET /tasks/next?rater=ID` returns the next task view or 204 when the
//! rater has nothing left. `POST /votes` stores a vote (201), rejects a
//! repeated (task, rater) pair or a task that already has enough votes
//! (409), and an unknown task (404). `GET /export` streams the vote log as
//! JSON Lines.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmcm::humaneval::{next_task_for, AppendOutcome, PairwiseTask, VoteRecord, VoteStore, VoteSubmission};
use serde::Deserialize;
use serde_json::json;

use crate::manifest::now;

pub struct AppState {
    tasks: Vec<PairwiseTask>,
    index: HashMap<String, usize>,
    /// Uniqueness check and append happen under one lock.
    store: Mutex<VoteStore>,
    raters_per_item: usize,
}

impl AppState {
    pub fn new(tasks: Vec<PairwiseTask>, store: VoteStore, raters_per_item: usize) -> Self {
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        Self {
            tasks,
            index,
            store: Mutex::new(store),
            raters_per_item,
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/votes", post(submit_vote))
        .route("/export", get(export))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    rater: Option<String>,
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let rater = match q.rater {
        Some(r) if !r.trim().is_empty() => r,
        _ => return error(StatusCode::BAD_REQUEST, "missing rater"),
    };
    let store = state.store.lock().expect("vote store lock");
    let votes = store.votes();
    match next_task_for(&state.tasks, votes, &rater, state.raters_per_item) {
        None => StatusCode::NO_CONTENT.into_response(),
        Some(task) => {
            let done = votes.iter().filter(|v| v.rater_id == rater).count();
            Json(task.view(done, state.tasks.len())).into_response()
        }
    }
}

async fn submit_vote(State(state): State<Arc<AppState>>, Json(sub): Json<VoteSubmission>) -> Response {
    if sub.rater_id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "missing rater_id");
    }
    if !state.index.contains_key(&sub.task_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown task_id {}", sub.task_id));
    }
    let mut store = state.store.lock().expect("vote store lock");
    if store.contains(&sub.task_id, &sub.rater_id) {
        return error(StatusCode::CONFLICT, "duplicate vote");
    }
    let count = store.votes().iter().filter(|v| v.task_id == sub.task_id).count();
    if count >= state.raters_per_item {
        return error(StatusCode::CONFLICT, "task already has all its votes");
    }
    let record = VoteRecord {
        task_id: sub.task_id,
        rater_id: sub.rater_id,
        choice: sub.choice,
        timestamp: now(),
    };
    match store.append(record.clone()) {
        Ok(AppendOutcome::Stored) => (StatusCode::CREATED, Json(record)).into_response(),
        Ok(AppendOutcome::Duplicate) => error(StatusCode::CONFLICT, "duplicate vote"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn export(State(state): State<Arc<AppState>>) -> Response {
    let store = state.store.lock().expect("vote store lock");
    match store.export_jsonl() {
        Ok(body) => ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves until interrupted.
pub fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
