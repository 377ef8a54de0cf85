use std::path::PathBuf;
use std::sync::Arc;

use daes_core::al_loop::{Engine, LoopError};
use daes_core::api::{AccuracyPoint, LabelSubmission, Phase, QueryBatch, QueryItem, SessionStatus, SubmissionSummary};
use tokio::sync::{mpsc, oneshot, watch};

use crate::error::ApiError;
use crate::render::sample_png;

/// What readers see without touching the engine.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub status: SessionStatus,
    pub batch: Option<Arc<QueryBatch>>,
}

type Reply = oneshot::Sender<Result<SubmissionSummary, ApiError>>;

enum Command {
    Submit(LabelSubmission, Reply),
}

/// A live session: one worker task owns the engine, mutations arrive through
/// a single queue, and status reads use the latest published snapshot.
pub struct SessionHandle {
    pub id: String,
    commands: mpsc::Sender<Command>,
    snapshot: watch::Receiver<Snapshot>,
}

impl SessionHandle {
    pub fn spawn(id: String, engine: Engine, checkpoint: Option<PathBuf>) -> Self {
        let (tx, rx) = mpsc::channel(16);
        let (snap_tx, snap_rx) = watch::channel(snapshot(&id, &engine, None));
        tokio::spawn(worker(id.clone(), engine, rx, snap_tx, checkpoint));
        Self {
            id,
            commands: tx,
            snapshot: snap_rx,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.borrow().clone()
    }

    pub async fn submit(&self, submission: LabelSubmission) -> Result<SubmissionSummary, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(Command::Submit(submission, reply))
            .await
            .map_err(|_| ApiError::internal("session worker stopped"))?;
        rx.await.map_err(|_| ApiError::internal("session worker stopped"))?
    }
}

fn status(id: &str, engine: &Engine, error: Option<String>) -> SessionStatus {
    let pools = engine.pools();
    SessionStatus {
        id: id.to_owned(),
        phase: if error.is_some() { Phase::Finished } else { engine.phase() },
        round: pools.round(),
        labeled: pools.num_labeled(),
        unlabeled: pools.num_unlabeled(),
        history: engine
            .metrics()
            .iter()
            .map(|r| AccuracyPoint {
                round: r.round,
                labeled: r.labeled,
                accuracy: r.accuracy,
            })
            .collect(),
        error,
    }
}

fn query_batch(engine: &Engine) -> Option<QueryBatch> {
    let pending = engine.pending()?;
    let dataset = &engine.data().dataset;
    let items = pending
        .indices
        .iter()
        .zip(&pending.scores)
        .map(|(&index, &score)| QueryItem {
            index,
            score,
            image: sample_png(dataset.train_x.row(index), dataset.image_shape).unwrap_or_default(),
        })
        .collect();
    Some(QueryBatch {
        batch_id: pending.id.clone(),
        round: pending.round,
        items,
        class_names: dataset.class_names.clone(),
    })
}

fn snapshot(id: &str, engine: &Engine, error: Option<String>) -> Snapshot {
    Snapshot {
        status: status(id, engine, error),
        batch: query_batch(engine).map(Arc::new),
    }
}

fn summary(engine: &Engine) -> SubmissionSummary {
    let pools = engine.pools();
    SubmissionSummary {
        round: pools.round(),
        labeled: pools.num_labeled(),
        unlabeled: pools.num_unlabeled(),
        latest_accuracy: engine.metrics().last().map(|r| r.accuracy),
        phase: engine.phase(),
    }
}

fn save(engine: &Engine, checkpoint: &Option<PathBuf>) -> Result<(), LoopError> {
    match checkpoint {
        Some(dir) => engine.save(dir),
        None => Ok(()),
    }
}

async fn worker(
    id: String,
    mut engine: Engine,
    mut commands: mpsc::Receiver<Command>,
    publish: watch::Sender<Snapshot>,
    checkpoint: Option<PathBuf>,
) {
    let mut error: Option<String> = None;
    loop {
        if engine.phase() == Phase::Training && error.is_none() {
            let dir = checkpoint.clone();
            let mut job = tokio::task::spawn_blocking(move || {
                let result = engine.advance().and_then(|_| save(&engine, &dir));
                (engine, result)
            });
            let mut open = true;
            let (returned, result) = loop {
                tokio::select! {
                    done = &mut job => break done.expect("training task panicked"),
                    cmd = commands.recv(), if open => match cmd {
                        Some(Command::Submit(_, reply)) => {
                            let _ = reply.send(Err(ApiError::new(
                                axum::http::StatusCode::CONFLICT,
                                "stale_batch",
                                "no batch is outstanding while the model trains",
                            )));
                        }
                        None => open = false,
                    },
                }
            };
            engine = returned;
            if let Err(e) = result {
                tracing::error!(session = %id, "training failed: {e}");
                error = Some(e.to_string());
            }
            let _ = publish.send(snapshot(&id, &engine, error.clone()));
            if !open {
                return;
            }
            continue;
        }
        let Some(Command::Submit(submission, reply)) = commands.recv().await else {
            return;
        };
        if error.is_some() {
            let _ = reply.send(Err(ApiError::finished()));
            continue;
        }
        let pairs: Vec<(usize, usize)> = submission.labels.iter().map(|l| (l.index, l.label)).collect();
        let result = engine
            .ingest(&submission.batch_id, &pairs)
            .and_then(|_| save(&engine, &checkpoint))
            .map(|_| summary(&engine))
            .map_err(ApiError::from);
        if result.is_ok() {
            tracing::info!(session = %id, labeled = engine.pools().num_labeled(), "labels ingested");
            let _ = publish.send(snapshot(&id, &engine, None));
        }
        let _ = reply.send(result);
    }
}
