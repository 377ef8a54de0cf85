use std::path::PathBuf;
use std::time::Duration;

use daes_client::{BatchState, Client, ClientError};
use daes_core::api::{LabelEntry, LabelSubmission, Phase, QueryBatch};
use daes_core::config::parse_config;
use daes_service::{AppState, Settings};
use reqwest::StatusCode;

const POLL: Duration = Duration::from_millis(20);

fn config(rounds: usize) -> String {
    format!(
        r#"{{"dataset": {{"kind": "blobs", "classes": 3, "dim": 4, "per_class": 60, "seed": 1}},
            "model": {{"epochs": 5, "ensemble_size": 2, "hidden": [8]}},
            "schedule": {{"initial_budget": 9, "step_budget": 6, "rounds": {rounds}}},
            "oracle": "live", "seeds": [5]}}"#
    )
}

fn truth() -> Vec<usize> {
    parse_config(&config(1)).unwrap().dataset.load(None).unwrap().train_y
}

async fn start(settings: Settings) -> (Client, tokio::task::JoinHandle<()>) {
    let state = AppState::new(settings);
    state.restore().await.unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move {
        daes_service::serve(listener, state).await.unwrap();
    });
    (Client::new(format!("http://{addr}")), server)
}

async fn default_server() -> Client {
    start(Settings::default()).await.0
}

fn status_of<T: std::fmt::Debug>(result: Result<T, ClientError>) -> StatusCode {
    result.expect_err("request should fail").status().expect("api error")
}

async fn next_batch(client: &Client, id: &str) -> QueryBatch {
    client.wait_for_batch(id, POLL).await.unwrap().expect("session still running")
}

fn submission(batch: &QueryBatch, label_of: impl Fn(usize) -> usize) -> LabelSubmission {
    LabelSubmission {
        batch_id: batch.batch_id.clone(),
        labels: batch.items.iter().map(|i| LabelEntry { index: i.index, label: label_of(i.index) }).collect(),
    }
}

#[tokio::test]
async fn session_runs_to_completion() {
    let client = default_server().await;
    let labels = truth();
    let created = client.create_session(&config(3)).await.unwrap();
    assert_eq!(created.status.labeled, 9);
    let mut rounds = 0;
    while let Some(batch) = client.wait_for_batch(&created.id, POLL).await.unwrap() {
        assert_eq!(batch.items.len(), 6);
        assert_eq!(batch.class_names.len(), 3);
        assert!(batch.items.iter().all(|i| !i.image.is_empty()));
        let summary = client.answer(&created.id, &batch, |i| labels[i]).await.unwrap();
        rounds += 1;
        assert_eq!(summary.labeled, 9 + 6 * rounds);
        assert!(summary.latest_accuracy.is_some());
    }
    assert_eq!(rounds, 3);
    let status = client.status(&created.id).await.unwrap();
    assert_eq!(status.phase, Phase::Finished);
    assert_eq!(status.labeled, 27);
    assert_eq!(status.history.len(), 4);
    assert!(status.error.is_none());
    assert_eq!(client.batch(&created.id).await.unwrap(), BatchState::Finished);
}

#[tokio::test]
async fn invalid_requests_are_rejected_with_codes() {
    let client = default_server().await;
    assert_eq!(status_of(client.status("nope").await), StatusCode::NOT_FOUND);
    assert_eq!(status_of(client.batch("nope").await), StatusCode::NOT_FOUND);

    let err = client.create_session("{not json").await.unwrap_err();
    assert_eq!(err.status(), Some(StatusCode::BAD_REQUEST));
    let bad = config(2).replace(r#""ensemble_size": 2"#, r#""ensemble_size": 0"#);
    match client.create_session(&bad).await.unwrap_err() {
        ClientError::Api { status, body } => {
            assert_eq!(status, StatusCode::BAD_REQUEST);
            assert_eq!(body.code, "invalid_config");
            assert_eq!(body.detail["field"], "model.ensemble_size");
        }
        other => panic!("unexpected {other:?}"),
    }
    let simulated = config(2).replace(r#""oracle": "live""#, r#""oracle": "simulated""#);
    assert_eq!(status_of(client.create_session(&simulated).await), StatusCode::BAD_REQUEST);

    let id = client.create_session(&config(2)).await.unwrap().id;
    let batch = next_batch(&client, &id).await;
    let labels = truth();

    let mut stale = submission(&batch, |i| labels[i]);
    stale.batch_id = "0000".into();
    assert_eq!(status_of(client.submit(&id, &stale).await), StatusCode::CONFLICT);

    let mut partial = submission(&batch, |i| labels[i]);
    partial.labels.pop();
    assert_eq!(status_of(client.submit(&id, &partial).await), StatusCode::UNPROCESSABLE_ENTITY);

    let out_of_range = submission(&batch, |_| 3);
    assert_eq!(status_of(client.submit(&id, &out_of_range).await), StatusCode::UNPROCESSABLE_ENTITY);

    let mut foreign = submission(&batch, |i| labels[i]);
    let unused = (0..labels.len()).find(|i| batch.items.iter().all(|b| b.index != *i)).unwrap();
    foreign.labels[0].index = unused;
    assert_eq!(status_of(client.submit(&id, &foreign).await), StatusCode::UNPROCESSABLE_ENTITY);

    // Nothing above changed the session.
    let status = client.status(&id).await.unwrap();
    assert_eq!((status.round, status.labeled), (0, 9));
    assert_eq!(client.batch(&id).await.unwrap(), BatchState::Ready(batch.clone()));

    let http = reqwest::Client::new();
    let url = format!("{}/api/session/{id}/labels", client.base());
    let response = http.post(&url).body(r#"{"batch_id": 3}"#).send().await.unwrap();
    assert_eq!(response.status(), StatusCode::BAD_REQUEST);
    let body: serde_json::Value = response.json().await.unwrap();
    assert_eq!(body["code"], "malformed_body");
    assert_eq!(body["detail"]["field"], "batch_id");
}

#[tokio::test]
async fn duplicate_concurrent_submissions_apply_once() {
    let client = default_server().await;
    let labels = truth();
    let id = client.create_session(&config(2)).await.unwrap().id;
    let batch = next_batch(&client, &id).await;
    let sub = submission(&batch, |i| labels[i]);
    let (a, b) = tokio::join!(client.submit(&id, &sub), client.submit(&id, &sub));
    let outcomes = [a.is_ok(), b.is_ok()];
    assert_eq!(outcomes.iter().filter(|ok| **ok).count(), 1, "{outcomes:?}");
    let loser = if a.is_ok() { b } else { a };
    assert_eq!(status_of(loser), StatusCode::CONFLICT);

    // While the next model trains there is no batch and submissions conflict.
    if let BatchState::Training = client.batch(&id).await.unwrap() {
        assert_eq!(status_of(client.submit(&id, &sub).await), StatusCode::CONFLICT);
    }
    let status = client.status(&id).await.unwrap();
    assert_eq!(status.labeled, 15);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let client = default_server().await;
    let labels = truth();
    let a = client.create_session(&config(2)).await.unwrap().id;
    let b = client.create_session(&config(2)).await.unwrap().id;
    assert_ne!(a, b);
    let batch = next_batch(&client, &a).await;
    client.answer(&a, &batch, |i| labels[i]).await.unwrap();
    assert_eq!(client.status(&a).await.unwrap().labeled, 15);
    assert_eq!(client.status(&b).await.unwrap().labeled, 9);
    // Same config and seed, so the first batches agree.
    let other = next_batch(&client, &b).await;
    assert_eq!(other.items.iter().map(|i| i.index).collect::<Vec<_>>(), batch.items.iter().map(|i| i.index).collect::<Vec<_>>());
}

#[tokio::test]
async fn restarted_server_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let settings = Settings {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Settings::default()
    };
    let labels = truth();
    let (client, server) = start(settings.clone()).await;
    let id = client.create_session(&config(3)).await.unwrap().id;
    let first = next_batch(&client, &id).await;
    client.answer(&id, &first, |i| labels[i]).await.unwrap();
    let second = next_batch(&client, &id).await;
    let before = client.status(&id).await.unwrap();
    server.abort();
    let _ = server.await;

    let (client, _server) = start(settings).await;
    let after = client.status(&id).await.unwrap();
    assert_eq!(after.labeled, before.labeled);
    assert_eq!(after.history, before.history);
    let resumed = next_batch(&client, &id).await;
    assert_eq!(resumed, second);
    client.answer(&id, &resumed, |i| labels[i]).await.unwrap();
    assert_eq!(client.status(&id).await.unwrap().labeled, 21);
}

#[tokio::test]
async fn root_serves_ui_bundle_or_placeholder() {
    let client = default_server().await;
    let base = client.base();
    let page = reqwest::get(format!("{base}/")).await.unwrap();
    assert_eq!(page.status(), StatusCode::OK);
    assert!(page.text().await.unwrap().contains("/api/session"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>bundle</p>").unwrap();
    let (client, _server) = start(Settings {
        static_dir: Some(PathBuf::from(dir.path())),
        ..Settings::default()
    })
    .await;
    let base = client.base();
    let page = reqwest::get(format!("{base}/")).await.unwrap();
    assert_eq!(page.text().await.unwrap(), "<p>bundle</p>");
}
