use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use daes_client::{BatchState, Client, ClientError};
use daes_core::api::{LabelSubmission, Phase, QueryBatch, QueryItem, SubmissionSummary};
use serde_json::json;

fn batch() -> QueryBatch {
    QueryBatch {
        batch_id: "b1".into(),
        round: 0,
        items: vec![
            QueryItem { index: 4, score: 0.5, image: String::new() },
            QueryItem { index: 9, score: 0.25, image: String::new() },
        ],
        class_names: vec!["a".into(), "b".into()],
    }
}

/// Answers 409 for the first two batch requests, then serves a batch.
async fn slow_batch(State(calls): State<Arc<AtomicUsize>>) -> impl IntoResponse {
    if calls.fetch_add(1, Ordering::SeqCst) < 2 {
        (StatusCode::CONFLICT, Json(json!({"code": "training", "message": "busy", "detail": null}))).into_response()
    } else {
        Json(batch()).into_response()
    }
}

async fn echo_labels(Json(sub): Json<LabelSubmission>) -> impl IntoResponse {
    if sub.batch_id != "b1" {
        return (StatusCode::CONFLICT, Json(json!({"code": "stale_batch", "message": "old", "detail": {"batch_id": sub.batch_id}})))
            .into_response();
    }
    let labeled = sub.labels.iter().map(|l| l.index + l.label).sum();
    Json(SubmissionSummary { round: 1, labeled, unlabeled: 0, latest_accuracy: None, phase: Phase::Training }).into_response()
}

async fn serve() -> (Client, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route("/api/session/slow/batch", get(slow_batch))
        .route("/api/session/done/batch", get(|| async { (StatusCode::GONE, Json(json!({"code": "finished", "message": "done", "detail": null}))) }))
        .route("/api/session/plain/status", get(|| async { (StatusCode::BAD_GATEWAY, "upstream down") }))
        .route("/api/session/slow/labels", post(echo_labels))
        .with_state(calls.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (Client::new(format!("http://{addr}/")), calls)
}

#[tokio::test]
async fn polling_waits_through_conflicts() {
    let (client, calls) = serve().await;
    assert_eq!(client.batch("slow").await.unwrap(), BatchState::Training);
    let got = client.wait_for_batch("slow", Duration::from_millis(5)).await.unwrap();
    assert_eq!(got, Some(batch()));
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn gone_means_finished() {
    let (client, _) = serve().await;
    assert_eq!(client.batch("done").await.unwrap(), BatchState::Finished);
    assert_eq!(client.wait_for_batch("done", Duration::from_millis(5)).await.unwrap(), None);
}

#[tokio::test]
async fn error_bodies_are_decoded() {
    let (client, _) = serve().await;
    let mut stale = batch();
    stale.batch_id = "b0".into();
    match client.answer("slow", &stale, |i| i).await.unwrap_err() {
        ClientError::Api { status, body } => {
            assert_eq!(status, 409);
            assert_eq!(body.code, "stale_batch");
            assert_eq!(body.detail["batch_id"], "b0");
        }
        other => panic!("unexpected {other:?}"),
    }
    // Non-JSON error bodies keep their text.
    let err = client.status("plain").await.unwrap_err();
    assert_eq!(err.status(), Some(reqwest::StatusCode::BAD_GATEWAY));
    match err {
        ClientError::Api { body, .. } => assert_eq!((body.code.as_str(), body.message.as_str()), ("unknown", "upstream down")),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn answer_labels_every_item() {
    let (client, _) = serve().await;
    let summary = client.answer("slow", &batch(), |i| i % 2).await.unwrap();
    assert_eq!(summary.labeled, 4 + 9 + 1);
    assert!(client.base().ends_with(char::is_numeric), "trailing slash trimmed");
}
