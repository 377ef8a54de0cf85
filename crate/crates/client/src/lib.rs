//! Thin async client for the annotation service.

use daes_core::api::{ErrorBody, LabelEntry, LabelSubmission, QueryBatch, SessionCreated, SessionStatus, SubmissionSummary};
use reqwest::StatusCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("{status}: {} ({})", body.message, body.code)]
    Api { status: StatusCode, body: ErrorBody },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
        }
    }
}

/// Outcome of asking for the outstanding batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchState {
    Ready(QueryBatch),
    Training,
    Finished,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn decode<T: serde::de::DeserializeOwned>(response: reqwest::Response) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let text = response.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            code: "unknown".into(),
            message: text,
            detail: serde_json::Value::Null,
        });
        Err(ClientError::Api { status, body })
    }

    /// Start a session from a JSON experiment config document.
    pub async fn create_session(&self, config_json: &str) -> Result<SessionCreated, ClientError> {
        let response = self
            .http
            .post(self.url("/api/session"))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(config_json.to_owned())
            .send()
            .await?;
        Self::decode(response).await
    }

    pub async fn batch(&self, id: &str) -> Result<BatchState, ClientError> {
        let response = self.http.get(self.url(&format!("/api/session/{id}/batch"))).send().await?;
        match Self::decode(response).await {
            Ok(batch) => Ok(BatchState::Ready(batch)),
            Err(ClientError::Api { status, .. }) if status == StatusCode::CONFLICT => Ok(BatchState::Training),
            Err(ClientError::Api { status, .. }) if status == StatusCode::GONE => Ok(BatchState::Finished),
            Err(e) => Err(e),
        }
    }

    /// Poll until a batch is ready or the session finishes.
    pub async fn wait_for_batch(&self, id: &str, poll: std::time::Duration) -> Result<Option<QueryBatch>, ClientError> {
        loop {
            match self.batch(id).await? {
                BatchState::Ready(batch) => return Ok(Some(batch)),
                BatchState::Finished => return Ok(None),
                BatchState::Training => tokio::time::sleep(poll).await,
            }
        }
    }

    pub async fn submit(&self, id: &str, submission: &LabelSubmission) -> Result<SubmissionSummary, ClientError> {
        let response = self
            .http
            .post(self.url(&format!("/api/session/{id}/labels")))
            .json(submission)
            .send()
            .await?;
        Self::decode(response).await
    }

    /// Label every item of a batch with `label_of(index)`.
    pub async fn answer(
        &self,
        id: &str,
        batch: &QueryBatch,
        label_of: impl Fn(usize) -> usize,
    ) -> Result<SubmissionSummary, ClientError> {
        let submission = LabelSubmission {
            batch_id: batch.batch_id.clone(),
            labels: batch
                .items
                .iter()
                .map(|item| LabelEntry {
                    index: item.index,
                    label: label_of(item.index),
                })
                .collect(),
        };
        self.submit(id, &submission).await
    }

    pub async fn status(&self, id: &str) -> Result<SessionStatus, ClientError> {
        let response = self.http.get(self.url(&format!("/api/session/{id}/status"))).send().await?;
        Self::decode(response).await
    }
}
