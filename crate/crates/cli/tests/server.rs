use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cmcm::humaneval::{make_pairwise_tasks, Choice, PairwiseTask, TaskQuery, Top1, VoteRecord, VoteStore};
use cmcm_cli::server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tasks(n: usize) -> Vec<PairwiseTask> {
    let top = |p: &str| (0..n).map(|i| Top1 { query_id: format!("q{i}"), image: format!("{p}{i}.jpg") }).collect::<Vec<_>>();
    let queries: Vec<TaskQuery> = (0..n)
        .map(|i| TaskQuery { query_id: format!("q{i}"), caption: format!("caption {i}"), relations: vec!["Story".into()] })
        .collect();
    make_pairwise_tasks(&top("m"), &top("a"), &queries, Some("Story"), 11).unwrap()
}

fn app(dir: &Path, n: usize, raters: usize) -> Router {
    let store = VoteStore::open(&dir.join("votes.jsonl")).unwrap();
    router(Arc::new(AppState::new(tasks(n), store, raters)))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let body = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(body.to_vec()).unwrap())
}

async fn next(app: &Router, rater: &str) -> (StatusCode, String) {
    send(app, Request::get(format!("/tasks/next?rater={rater}")).body(Body::empty()).unwrap()).await
}

async fn vote(app: &Router, body: Value) -> (StatusCode, String) {
    let req = Request::post("/votes")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

/// Keys that would reveal which model produced which image.
fn assert_no_provenance(payload: &str) {
    for key in ["provenance", "cmcm_side", "cmcm", "cmca", "relation_tag", "image_left", "image_right"] {
        assert!(!payload.contains(key), "payload leaks `{key}`: {payload}");
    }
}

#[tokio::test]
async fn rater_flow() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 5, 3);
    let mut submitted = Vec::new();
    let choices = [Choice::PreferA, Choice::PreferB, Choice::Same, Choice::Neither, Choice::PreferA];
    for (i, choice) in choices.iter().enumerate() {
        let (status, body) = next(&app, "alice").await;
        assert_eq!(status, StatusCode::OK);
        assert_no_provenance(&body);
        let view: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(view["task_id"], format!("task{i:05}"));
        assert_eq!(view["progress"], json!({"completed": i, "total": 5}));
        let keys: Vec<&String> = view.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["caption", "image_a", "image_b", "progress", "task_id"]);
        let (status, body) = vote(&app, json!({"task_id": view["task_id"], "rater_id": "alice", "choice": choice})).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_no_provenance(&body);
        submitted.push((view["task_id"].as_str().unwrap().to_string(), *choice));
    }
    let (status, body) = next(&app, "alice").await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(body.is_empty());

    // a fresh rater starts from the first task
    let (_, body) = next(&app, "bob").await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["task_id"], "task00000");

    let (status, body) = send(&app, Request::get("/export").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_no_provenance(&body);
    let exported: Vec<VoteRecord> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let got: Vec<(String, Choice)> = exported.iter().map(|v| (v.task_id.clone(), v.choice)).collect();
    assert_eq!(got, submitted);
    assert!(exported.iter().all(|v| v.rater_id == "alice" && chrono_like(&v.timestamp)));
    let persisted = std::fs::read_to_string(dir.path().join("votes.jsonl")).unwrap();
    assert_eq!(persisted, body);
}

fn chrono_like(ts: &str) -> bool {
    ts.len() >= 20 && ts.ends_with('Z') && ts.as_bytes()[10] == b'T'
}

#[tokio::test]
async fn duplicate_submission_keeps_one_vote() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2, 3);
    let body = json!({"task_id": "task00000", "rater_id": "r", "choice": "same"});
    assert_eq!(vote(&app, body.clone()).await.0, StatusCode::CREATED);
    assert_eq!(vote(&app, body).await.0, StatusCode::CONFLICT);
    let changed = json!({"task_id": "task00000", "rater_id": "r", "choice": "neither"});
    assert_eq!(vote(&app, changed).await.0, StatusCode::CONFLICT);
    let (_, export) = send(&app, Request::get("/export").body(Body::empty()).unwrap()).await;
    assert_eq!(export.lines().count(), 1);
    assert!(export.contains("\"same\""));
}

#[tokio::test]
async fn concurrent_duplicates_persist_once() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1, 3);
    let mut handles = Vec::new();
    for _ in 0..16 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            vote(&app, json!({"task_id": "task00000", "rater_id": "r", "choice": "prefer_B"})).await.0
        }));
    }
    let mut created = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::CREATED => created += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(created, 1);
    let store = VoteStore::open(&dir.path().join("votes.jsonl")).unwrap();
    assert_eq!(store.votes().len(), 1);
}

#[tokio::test]
async fn request_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1, 2);
    assert_eq!(
        vote(&app, json!({"task_id": "task99999", "rater_id": "r", "choice": "same"})).await.0,
        StatusCode::NOT_FOUND
    );
    let (status, _) = vote(&app, json!({"task_id": "task00000", "rater_id": "r", "choice": "prefer_C"})).await;
    assert!(status.is_client_error());
    let (status, _) = vote(&app, json!({"task_id": "task00000", "rater_id": "r", "choice": "same", "cmcm_side": "left"})).await;
    assert!(status.is_client_error());
    assert_eq!(vote(&app, json!({"task_id": "task00000", "rater_id": " ", "choice": "same"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(next(&app, "").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, Request::get("/tasks/next").body(Body::empty()).unwrap()).await.0, StatusCode::BAD_REQUEST);

    // the task closes once it has all its votes
    for r in ["a", "b"] {
        assert_eq!(vote(&app, json!({"task_id": "task00000", "rater_id": r, "choice": "same"})).await.0, StatusCode::CREATED);
    }
    assert_eq!(next(&app, "c").await.0, StatusCode::NO_CONTENT);
    assert_eq!(
        vote(&app, json!({"task_id": "task00000", "rater_id": "c", "choice": "same"})).await.0,
        StatusCode::CONFLICT
    );
}

#[tokio::test]
async fn votes_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = app(dir.path(), 2, 3);
        vote(&app, json!({"task_id": "task00000", "rater_id": "r", "choice": "prefer_A"})).await;
    }
    let app = app(dir.path(), 2, 3);
    let (_, body) = next(&app, "r").await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["task_id"], "task00001");
    assert_eq!(
        vote(&app, json!({"task_id": "task00000", "rater_id": "r", "choice": "prefer_A"})).await.0,
        StatusCode::CONFLICT
    );
}
