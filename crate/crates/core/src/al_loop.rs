//! Pool-based active learning: train, score, select, label, repeat.
//!
//! The [`Engine`] is a sequential state machine. It trains when it has fresh
//! labels, then either issues a query batch or finishes. Labels come back
//! through [`Engine::ingest`], from a simulated oracle or a person.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, Strategy};
use crate::api::Phase;
use crate::config::{ConfigError, ExperimentConfig, SslConfig, Uncertainty};
use crate::data::{DataError, Dataset};
use crate::ensemble::{
    self, ensemble_mean, init_ensemble, EnsembleError, EnsembleModel, JointTrainConfig, PredictiveDistribution,
    RetrainMode, SharedPrior,
};
use crate::nn::{self, AdamConfig, NetworkSpec, NnError, Tensor};
use crate::rng::{self, stream};
use crate::ssl::{self, EncoderHead, FrozenEncoder, PretrainReport, SslError};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error("schedule needs {required} samples but the pool has {available}")]
    InfeasibleSchedule { required: usize, available: usize },
    #[error("class {class} has {available} samples, fewer than its balanced share {required}")]
    InsufficientClass { class: usize, available: usize, required: usize },
    #[error("engine is {phase:?}, cannot {action}")]
    WrongPhase { phase: Phase, action: &'static str },
    #[error("batch {found} is not the outstanding batch")]
    StaleBatch { found: String },
    #[error("submission misses indices {missing:?}")]
    PartialCoverage { missing: Vec<usize> },
    #[error("index {0} is not part of the outstanding batch or is repeated")]
    UnexpectedIndex(usize),
    #[error("label {label} for index {index} outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LoopError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        LoopError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// Labeled and unlabeled training indices. The labeled list keeps arrival order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    labeled: Vec<usize>,
    is_labeled: Vec<bool>,
    round: usize,
}

impl PoolState {
    pub fn from_labeled(pool_size: usize, labeled: Vec<usize>, round: usize) -> Result<Self, LoopError> {
        let mut is_labeled = vec![false; pool_size];
        for &i in &labeled {
            if i >= pool_size || is_labeled[i] {
                return Err(LoopError::UnexpectedIndex(i));
            }
            is_labeled[i] = true;
        }
        Ok(Self {
            labeled,
            is_labeled,
            round,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.is_labeled.len()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.pool_size() - self.labeled.len()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.is_labeled[i]
    }

    /// Unlabeled indices in ascending order.
    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.pool_size()).filter(|&i| !self.is_labeled[i]).collect()
    }

    /// Move a batch of unlabeled indices into the labeled set and open the next round.
    pub fn add_batch(&mut self, batch: &[usize]) -> Result<(), LoopError> {
        let mut seen = self.is_labeled.clone();
        for &i in batch {
            if i >= self.pool_size() || seen[i] {
                return Err(LoopError::UnexpectedIndex(i));
            }
            seen[i] = true;
        }
        self.is_labeled = seen;
        self.labeled.extend_from_slice(batch);
        self.round += 1;
        Ok(())
    }
}

/// Class-balanced initial labeled set: `initial / C` per class, the remainder
/// going to classes drawn by the seed.
pub fn init_pools(labels: &[usize], num_classes: usize, initial: usize, seed: u64) -> Result<PoolState, LoopError> {
    let n = labels.len();
    if initial > n {
        return Err(LoopError::InfeasibleSchedule {
            required: initial,
            available: n,
        });
    }
    if initial == n {
        return PoolState::from_labeled(n, (0..n).collect(), 0);
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, &[stream::POOLS]));
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut share = vec![initial / num_classes; num_classes];
    for c in sample(&mut rng, num_classes, initial % num_classes) {
        share[c] += 1;
    }
    let mut labeled = Vec::with_capacity(initial);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < share[class] {
            return Err(LoopError::InsufficientClass {
                class,
                available: members.len(),
                required: share[class],
            });
        }
        let mut picked: Vec<usize> = sample(&mut rng, members.len(), share[class])
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        labeled.extend(picked);
    }
    PoolState::from_labeled(n, labeled, 0)
}

/// Model inputs for the train and test splits: raw pixels, or embeddings of a
/// frozen pretrained encoder.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub train_features: Tensor,
    pub test_features: Tensor,
    pub encoder: Option<Arc<FrozenEncoder>>,
    pub pretrain_report: Option<PretrainReport>,
}

impl PreparedData {
    pub fn raw(dataset: Dataset) -> Self {
        Self {
            train_features: dataset.train_x.clone(),
            test_features: dataset.test_x.clone(),
            dataset,
            encoder: None,
            pretrain_report: None,
        }
    }

    pub fn with_encoder(dataset: Dataset, encoder: Arc<FrozenEncoder>) -> Result<Self, LoopError> {
        Ok(Self {
            train_features: encoder.encode(dataset.train_x.view())?,
            test_features: encoder.encode(dataset.test_x.view())?,
            dataset,
            encoder: Some(encoder),
            pretrain_report: None,
        })
    }

    /// Raw features, or pretrain an encoder on the training pool first.
    pub fn prepare(dataset: Dataset, ssl: Option<&SslConfig>, seed: u64) -> Result<Self, LoopError> {
        match ssl {
            None => Ok(Self::raw(dataset)),
            Some(cfg) => {
                let (encoder, report) = pretrain_encoder(&dataset, cfg, seed)?;
                let mut data = Self::with_encoder(dataset, Arc::new(encoder))?;
                data.pretrain_report = Some(report);
                Ok(data)
            }
        }
    }
}

/// Self-supervised pretraining on a seeded subset of the training pool.
/// Test samples are never used.
pub fn pretrain_encoder(
    dataset: &Dataset,
    config: &SslConfig,
    seed: u64,
) -> Result<(FrozenEncoder, PretrainReport), LoopError> {
    let seed = rng::derive_seed(seed, &[stream::SSL]);
    let n = dataset.train_len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    order.truncate(config.pool_size.unwrap_or(n).min(n));
    let pool = nn::gather_rows(dataset.train_x.view(), &order);
    let head = EncoderHead::new(dataset.input_dim(), config, seed)?;
    let (trained, report) = ssl::pretrain(&head, pool.view(), dataset.image_shape, config, seed)?;
    Ok((trained.freeze(), report))
}

/// Queried samples awaiting labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub id: String,
    pub round: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// One completed round: the model trained on `labeled` samples, its test
/// accuracy, and statistics of the batch it then selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled: usize,
    pub labeled_fraction: f64,
    pub accuracy: f64,
    pub score_mean: Option<f64>,
    pub score_max: Option<f64>,
    pub train_seconds: f64,
    pub select_seconds: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub selected: Vec<usize>,
}

impl RoundRecord {
    /// The record with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            train_seconds: 0.0,
            select_seconds: 0.0,
            ..self.clone()
        }
    }
}

pub trait Oracle {
    fn label(&mut self, indices: &[usize]) -> Result<Vec<usize>, LoopError>;
}

/// Answers with ground-truth labels.
pub struct SimulatedOracle<'a> {
    pub labels: &'a [usize],
}

impl Oracle for SimulatedOracle<'_> {
    fn label(&mut self, indices: &[usize]) -> Result<Vec<usize>, LoopError> {
        indices
            .iter()
            .map(|&i| self.labels.get(i).copied().ok_or(LoopError::UnexpectedIndex(i)))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EngineState {
    config: ExperimentConfig,
    seed: u64,
    pools: PoolState,
    phase: Phase,
    pending: Option<PendingBatch>,
    metrics: Vec<RoundRecord>,
    /// Oracle label of every labeled index, in `pools.labeled()` order.
    labels: Vec<usize>,
    epochs_consumed: usize,
    /// Size of the most recently ingested batch.
    last_added: usize,
    has_encoder: bool,
}

const STATE_FILE: &str = "engine.json";
const MODEL_FILE: &str = "model.ckpt";
const ENCODER_FILE: &str = "encoder.ckpt";

pub struct Engine {
    state: EngineState,
    data: Arc<PreparedData>,
    model: EnsembleModel,
    spec: NetworkSpec,
    prior: SharedPrior,
}

impl Engine {
    pub fn new(config: ExperimentConfig, data: Arc<PreparedData>, seed: u64) -> Result<Self, LoopError> {
        config.validate()?;
        let n = data.dataset.train_len();
        let initial = config.schedule.initial_budget.resolve(n);
        let step = config.schedule.step_budget.resolve(n);
        let required = initial + step * config.schedule.rounds;
        if initial > n || (required > n && initial < n) {
            return Err(LoopError::InfeasibleSchedule { required, available: n });
        }
        let pools = init_pools(&data.dataset.train_y, data.dataset.num_classes, initial, seed)?;
        let labels = nn::gather_labels(&data.dataset.train_y, pools.labeled());
        let (spec, prior) = model_spec(&config, &data)?;
        let model = init_ensemble(
            &spec,
            config.model.ensemble_size,
            prior,
            config.model.mode,
            rng::derive_seed(seed, &[stream::INIT, 0]),
        )?;
        Ok(Self {
            state: EngineState {
                has_encoder: data.encoder.is_some(),
                config,
                seed,
                pools,
                phase: Phase::Training,
                pending: None,
                metrics: Vec::new(),
                labels,
                epochs_consumed: 0,
                last_added: 0,
            },
            data,
            model,
            spec,
            prior,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.state.config
    }

    pub fn seed(&self) -> u64 {
        self.state.seed
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn pools(&self) -> &PoolState {
        &self.state.pools
    }

    pub fn metrics(&self) -> &[RoundRecord] {
        &self.state.metrics
    }

    pub fn pending(&self) -> Option<&PendingBatch> {
        self.state.pending.as_ref()
    }

    pub fn model(&self) -> &EnsembleModel {
        &self.model
    }

    pub fn data(&self) -> &Arc<PreparedData> {
        &self.data
    }

    /// Features and oracle labels of the labeled samples from position `from` on.
    fn labeled_set(&self, from: usize) -> (Tensor, Vec<usize>) {
        (
            nn::gather_rows(self.data.train_features.view(), &self.state.pools.labeled()[from..]),
            self.state.labels[from..].to_vec(),
        )
    }

    fn train_config(&self, epochs: usize, seed: u64) -> JointTrainConfig {
        let m = &self.state.config.model;
        JointTrainConfig {
            epochs,
            batch_size: m.batch_size,
            anchor_coefficient: m.anchor_coefficient,
            adam: AdamConfig {
                learning_rate: m.learning_rate,
                ..AdamConfig::default()
            },
            seed,
        }
    }

    fn train_round(&mut self) -> Result<(), LoopError> {
        let round = self.state.pools.round() as u64;
        let seed = self.state.seed;
        let cfg = &self.state.config;
        let incremental = cfg.schedule.retrain_mode == RetrainMode::Incremental;
        let inc_epochs = cfg.schedule.incremental_epochs;
        let (x, y) = self.labeled_set(0);
        if !incremental || round == 0 {
            let init_seed = if cfg.model.resample_prior_each_round || incremental {
                rng::derive_seed(seed, &[stream::INIT, round])
            } else {
                rng::derive_seed(seed, &[stream::INIT, 0])
            };
            self.model = init_ensemble(&self.spec, cfg.model.ensemble_size, self.prior, cfg.model.mode, init_seed)?;
            let epochs = if incremental { inc_epochs } else { cfg.model.epochs };
            let train_seed = rng::derive_seed(seed, &[stream::TRAIN, round]);
            self.model.fit(x.view(), &y, &self.train_config(epochs, train_seed))?;
            self.state.epochs_consumed = epochs;
            return Ok(());
        }
        if self.state.last_added > 0 && self.state.epochs_consumed > 0 {
            let (bx, by) = self.labeled_set(self.state.labels.len() - self.state.last_added);
            let phase1 = self.train_config(self.state.epochs_consumed, rng::derive_seed(seed, &[stream::TRAIN, round, 1]));
            self.model.fit(bx.view(), &by, &phase1)?;
        }
        let phase2 = self.train_config(inc_epochs, rng::derive_seed(seed, &[stream::TRAIN, round, 2]));
        self.model.fit(x.view(), &y, &phase2)?;
        self.state.epochs_consumed += inc_epochs;
        Ok(())
    }

    fn uncertainty(&self, x: ndarray::ArrayView2<f64>, round: u64) -> Result<PredictiveDistribution, LoopError> {
        let cfg = &self.state.config.model;
        Ok(match cfg.uncertainty {
            Uncertainty::Ensemble => self.model.predict_members(x)?,
            Uncertainty::McDropout => self.model.predict_mc_dropout(
                0,
                x,
                cfg.mc_passes,
                rng::derive_seed(self.state.seed, &[stream::DROPOUT, round]),
            )?,
        })
    }

    fn select(&self, b: usize) -> Result<(Vec<usize>, Vec<f64>), LoopError> {
        let round = self.state.pools.round() as u64;
        let unlabeled = self.state.pools.unlabeled();
        let strategy = self.state.config.strategy;
        let (positions, scores) = match strategy {
            Strategy::Random => {
                let r = acquisition::random_select(
                    unlabeled.len(),
                    b,
                    rng::derive_seed(self.state.seed, &[stream::SELECT, round]),
                )?;
                (r.indices, r.scores)
            }
            Strategy::Coreset => {
                let features = match self.data.encoder {
                    Some(_) => self.data.train_features.clone(),
                    None => self.model.embed(self.data.train_features.view())?,
                };
                let r = acquisition::kcenter_greedy(features.view(), self.state.pools.labeled(), b)?;
                return Ok((r.indices, r.scores));
            }
            Strategy::Entropy | Strategy::Bald | Strategy::Vr => {
                let x = self.data.train_features.select(Axis(0), &unlabeled);
                let dist = self.uncertainty(x.view(), round)?;
                let all = match strategy {
                    Strategy::Entropy => acquisition::entropy_scores(ensemble_mean(&dist).view()),
                    Strategy::Bald => acquisition::bald_scores(&dist),
                    _ => acquisition::vr_scores(&dist),
                };
                let r = acquisition::select_batch(&all, b)?;
                (r.indices, r.scores)
            }
        };
        Ok((positions.into_iter().map(|p| unlabeled[p]).collect(), scores))
    }

    /// Train on the current labeled set, evaluate, and either issue the next
    /// query batch or finish.
    pub fn advance(&mut self) -> Result<Phase, LoopError> {
        if self.state.phase != Phase::Training {
            return Err(LoopError::WrongPhase {
                phase: self.state.phase,
                action: "train",
            });
        }
        let started = Instant::now();
        self.train_round()?;
        let train_seconds = started.elapsed().as_secs_f64();
        let accuracy = ensemble::accuracy(&self.model, self.data.test_features.view(), &self.data.dataset.test_y)?;

        let pools = &self.state.pools;
        let n = pools.pool_size();
        let step = self.state.config.schedule.step_budget.resolve(n).min(pools.num_unlabeled());
        let more = pools.round() < self.state.config.schedule.rounds && step > 0;
        let started = Instant::now();
        let (selected, scores) = if more { self.select(step)? } else { (Vec::new(), Vec::new()) };
        let select_seconds = started.elapsed().as_secs_f64();

        let round = pools.round();
        let stats = (!scores.is_empty()).then(|| {
            (
                scores.iter().sum::<f64>() / scores.len() as f64,
                scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        });
        self.state.metrics.push(RoundRecord {
            round,
            labeled: pools.num_labeled(),
            labeled_fraction: pools.num_labeled() as f64 / n as f64,
            accuracy,
            score_mean: stats.map(|s| s.0),
            score_max: stats.map(|s| s.1),
            train_seconds,
            select_seconds,
            seed: self.state.seed,
            strategy: self.state.config.strategy,
            selected: selected.clone(),
        });
        if more {
            self.state.pending = Some(PendingBatch {
                id: format!("{:016x}", rng::derive_seed(self.state.seed, &[stream::SELECT, round as u64, 0xba7c])),
                round,
                indices: selected,
                scores,
            });
            self.state.phase = Phase::AwaitingLabels;
        } else {
            self.state.phase = Phase::Finished;
        }
        Ok(self.state.phase)
    }

    /// Accept labels for exactly the outstanding batch.
    pub fn ingest(&mut self, batch_id: &str, labels: &[(usize, usize)]) -> Result<(), LoopError> {
        let pending = match (&self.state.phase, &self.state.pending) {
            (Phase::AwaitingLabels, Some(p)) => p,
            _ => {
                return Err(LoopError::WrongPhase {
                    phase: self.state.phase,
                    action: "accept labels",
                })
            }
        };
        if pending.id != batch_id {
            return Err(LoopError::StaleBatch {
                found: batch_id.to_owned(),
            });
        }
        let classes = self.data.dataset.num_classes;
        let mut given: Vec<Option<usize>> = vec![None; pending.indices.len()];
        for &(index, label) in labels {
            let pos = pending
                .indices
                .iter()
                .position(|&i| i == index)
                .filter(|&p| given[p].is_none())
                .ok_or(LoopError::UnexpectedIndex(index))?;
            if label >= classes {
                return Err(LoopError::LabelOutOfRange { index, label, classes });
            }
            given[pos] = Some(label);
        }
        let missing: Vec<usize> = pending
            .indices
            .iter()
            .zip(&given)
            .filter(|(_, g)| g.is_none())
            .map(|(&i, _)| i)
            .collect();
        if !missing.is_empty() {
            return Err(LoopError::PartialCoverage { missing });
        }
        let indices = pending.indices.clone();
        self.state.pools.add_batch(&indices)?;
        self.state.labels.extend(given.into_iter().map(|g| g.expect("coverage checked")));
        self.state.last_added = indices.len();
        self.state.pending = None;
        self.state.phase = Phase::Training;
        Ok(())
    }

    /// Drive the loop until the schedule is exhausted.
    pub fn run_to_completion(&mut self, oracle: &mut dyn Oracle) -> Result<&[RoundRecord], LoopError> {
        loop {
            match self.state.phase {
                Phase::Training => {
                    self.advance()?;
                }
                Phase::AwaitingLabels => {
                    let batch = self.state.pending.clone().expect("pending batch while awaiting labels");
                    let labels = oracle.label(&batch.indices)?;
                    let pairs: Vec<(usize, usize)> = batch.indices.iter().copied().zip(labels).collect();
                    self.ingest(&batch.id, &pairs)?;
                }
                Phase::Finished => return Ok(&self.state.metrics),
            }
        }
    }

    /// Persist the full engine state to `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), LoopError> {
        fs::create_dir_all(dir).map_err(|e| LoopError::io(dir, e))?;
        self.model
            .save(&dir.join(MODEL_FILE))
            .map_err(|e| LoopError::Checkpoint(e.to_string()))?;
        if let Some(encoder) = &self.data.encoder {
            encoder.save(&dir.join(ENCODER_FILE))?;
        }
        let path = dir.join(STATE_FILE);
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string_pretty(&self.state).map_err(|e| LoopError::Checkpoint(e.to_string()))?;
        fs::write(&tmp, text).map_err(|e| LoopError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| LoopError::io(&path, e))?;
        Ok(())
    }

    /// The experiment config stored in a checkpoint directory.
    pub fn peek_config(dir: &Path) -> Result<(ExperimentConfig, u64), LoopError> {
        let state = read_state(dir)?;
        Ok((state.config, state.seed))
    }

    /// Restore an engine saved with [`Engine::save`]. `dataset` must be the
    /// dataset the engine was created with.
    pub fn resume(dir: &Path, dataset: Dataset) -> Result<Self, LoopError> {
        let state = read_state(dir)?;
        if state.pools.pool_size() != dataset.train_len() || state.labels.len() != state.pools.num_labeled() {
            return Err(LoopError::Checkpoint("checkpoint does not match the dataset".into()));
        }
        let data = if state.has_encoder {
            let encoder = FrozenEncoder::load(&dir.join(ENCODER_FILE))?;
            PreparedData::with_encoder(dataset, Arc::new(encoder))?
        } else {
            PreparedData::raw(dataset)
        };
        let data = Arc::new(data);
        let (spec, prior) = model_spec(&state.config, &data)?;
        let model = EnsembleModel::load(&dir.join(MODEL_FILE)).map_err(|e| LoopError::Checkpoint(e.to_string()))?;
        if model.spec != spec {
            return Err(LoopError::Checkpoint("model checkpoint does not match the config".into()));
        }
        Ok(Self {
            state,
            data,
            model,
            spec,
            prior,
        })
    }
}

fn read_state(dir: &Path) -> Result<EngineState, LoopError> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LoopError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LoopError::Checkpoint(e.to_string()))
}

fn model_spec(config: &ExperimentConfig, data: &PreparedData) -> Result<(NetworkSpec, SharedPrior), LoopError> {
    let hidden = match (&config.ssl, &data.encoder) {
        (Some(ssl), Some(_)) => ssl.head_hidden.clone(),
        _ => config.model.hidden.clone(),
    };
    let mut widths = vec![data.train_features.ncols()];
    widths.extend(hidden);
    widths.push(data.dataset.num_classes);
    let spec = NetworkSpec::new(widths, config.model.activation, config.model.dropout_rate)?;
    let prior = match config.model.prior {
        Some(p) => SharedPrior::new(p.mean, p.variance)?,
        None => SharedPrior::xavier_scaled(&spec),
    };
    Ok((spec, prior))
}

/// One full simulated-oracle run.
pub fn run_experiment(config: &ExperimentConfig, data: Arc<PreparedData>, seed: u64) -> Result<Vec<RoundRecord>, LoopError> {
    let truth = data.dataset.train_y.clone();
    let mut engine = Engine::new(config.clone(), data, seed)?;
    engine.run_to_completion(&mut SimulatedOracle { labels: &truth })?;
    Ok(engine.state.metrics)
}
