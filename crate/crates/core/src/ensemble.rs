//! Ensembles of identically structured networks.
//!
//! In shared-prior mode every member's initial weights are i.i.d. draws from
//! one Gaussian prior. The draws are kept as anchors, and training minimises
//! the sum over members of cross-entropy plus `lambda * |theta_i - anchor_i|^2`
//! with a single Adam state over the concatenated parameters. The classical
//! mode trains Xavier-initialised members independently.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::nn::{
    self, AdamConfig, AdamState, DropoutMask, NetworkSpec, NnError, ParamVector, Tensor,
};
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("cannot train on an empty labeled set")]
    EmptyLabeledSet,
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedPrior {
    pub mean: f64,
    pub variance: f64,
}

impl SharedPrior {
    pub fn new(mean: f64, variance: f64) -> Result<Self, EnsembleError> {
        if !(variance > 0.0 && variance.is_finite() && mean.is_finite()) {
            return Err(EnsembleError::Invalid(format!(
                "prior variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self { mean, variance })
    }

    /// Zero mean, variance `2 / (fan_in + fan_out)` averaged over layers.
    pub fn xavier_scaled(spec: &NetworkSpec) -> Self {
        let layers = spec.layers();
        let variance = layers
            .iter()
            .map(|l| 2.0 / (l.fan_in + l.fan_out) as f64)
            .sum::<f64>()
            / layers.len() as f64;
        Self { mean: 0.0, variance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    SharedPriorJoint,
    IndependentClassical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    Scratch,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub anchor_coefficient: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub spec: NetworkSpec,
    pub mode: EnsembleMode,
    pub prior: SharedPrior,
    pub members: Vec<ParamVector>,
    pub anchors: Vec<ParamVector>,
}

/// Per-sample member class probabilities, stored as `samples x M x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    probs: Array3<f64>,
}

impl PredictiveDistribution {
    pub fn new(probs: Array3<f64>) -> Self {
        assert!(probs.dim().1 >= 1, "at least one member row per sample");
        Self { probs }
    }

    /// Assemble from one `samples x C` probability matrix per member.
    pub fn from_members(per_member: &[Tensor]) -> Self {
        assert!(!per_member.is_empty());
        let (n, c) = per_member[0].dim();
        let mut probs = Array3::zeros((n, per_member.len(), c));
        for (i, p) in per_member.iter().enumerate() {
            probs.slice_mut(s![.., i, ..]).assign(p);
        }
        Self { probs }
    }

    pub fn num_samples(&self) -> usize {
        self.probs.dim().0
    }

    pub fn num_members(&self) -> usize {
        self.probs.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().2
    }

    /// The `M x C` matrix of one sample.
    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.probs.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.probs
    }

    /// Keep only the listed samples, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            probs: self.probs.select(Axis(0), rows),
        }
    }
}

/// Arithmetic mean over member rows for every sample.
pub fn ensemble_mean(dist: &PredictiveDistribution) -> Tensor {
    dist.probs.mean_axis(Axis(1)).expect("at least one member")
}

pub fn init_ensemble(
    spec: &NetworkSpec,
    m: usize,
    prior: SharedPrior,
    mode: EnsembleMode,
    seed: u64,
) -> Result<EnsembleModel, EnsembleError> {
    if m == 0 {
        return Err(EnsembleError::Invalid("ensemble needs at least one member".into()));
    }
    let members: Vec<ParamVector> = match mode {
        EnsembleMode::SharedPriorJoint => {
            let mut rng = rng::seeded(rng::derive_seed(seed, &[stream::INIT]));
            (0..m)
                .map(|_| nn::gaussian_init(spec, prior.mean, prior.variance, &mut rng))
                .collect()
        }
        EnsembleMode::IndependentClassical => (0..m)
            .map(|i| nn::xavier_init(spec, rng::derive_seed(seed, &[stream::INIT, i as u64])))
            .collect(),
    };
    Ok(EnsembleModel {
        spec: spec.clone(),
        mode,
        prior,
        anchors: members.clone(),
        members,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Summed member objective per epoch (size-weighted over batches).
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleHeader {
    kind: String,
    spec: NetworkSpec,
    mode: EnsembleMode,
    prior: SharedPrior,
    members: usize,
    params_per_member: usize,
}

impl EnsembleModel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Summed member objective with anchor penalty, and one gradient per member.
    pub fn joint_loss(
        &self,
        batch: ArrayView2<f64>,
        labels: &[usize],
        anchor_coefficient: f64,
    ) -> Result<(f64, Vec<ParamVector>), EnsembleError> {
        self.joint_loss_masked(batch, labels, anchor_coefficient, None)
    }

    fn joint_loss_masked(
        &self,
        batch: ArrayView2<f64>,
        labels: &[usize],
        anchor_coefficient: f64,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Vec<ParamVector>), EnsembleError> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.members.len());
        for (i, (theta, anchor)) in self.members.iter().zip(&self.anchors).enumerate() {
            let mask = masks.map(|m| &m[i]);
            let (loss, mut grad) = nn::loss_and_grad_masked(&self.spec, theta, batch, labels, mask)?;
            total += loss;
            if anchor_coefficient != 0.0 {
                total += anchor_coefficient * theta.squared_distance(anchor);
                for ((g, t), a) in grad.0.iter_mut().zip(&theta.0).zip(&anchor.0) {
                    *g += 2.0 * anchor_coefficient * (t - a);
                }
            }
            grads.push(grad);
        }
        Ok((total, grads))
    }

    /// Re-draw members (and anchors) for from-scratch training.
    pub fn reinitialized(&self, seed: u64) -> Result<Self, EnsembleError> {
        init_ensemble(&self.spec, self.members.len(), self.prior, self.mode, seed)
    }

    /// Continue training the current members for `config.epochs` epochs.
    pub fn fit(
        &mut self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        config: &JointTrainConfig,
    ) -> Result<TrainReport, EnsembleError> {
        if inputs.nrows() == 0 {
            return Err(EnsembleError::EmptyLabeledSet);
        }
        match self.mode {
            EnsembleMode::SharedPriorJoint => self.fit_joint(inputs, labels, config),
            EnsembleMode::IndependentClassical => self.fit_independent(inputs, labels, config),
        }
    }

    fn fit_joint(
        &mut self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        config: &JointTrainConfig,
    ) -> Result<TrainReport, EnsembleError> {
        let p = self.spec.num_params();
        let m = self.members.len();
        let mut adam = AdamState::new(p * m, config.adam);
        let mut joint: Vec<f64> = self.members.iter().flat_map(|t| t.0.iter().copied()).collect();
        let mut joint_grad = vec![0.0; p * m];
        let mut shuffle = rng::seeded(rng::derive_seed(config.seed, &[stream::TRAIN]));
        let mut dropout = rng::seeded(rng::derive_seed(config.seed, &[stream::DROPOUT]));
        let mut report = TrainReport::default();
        for _ in 0..config.epochs {
            let mut total = 0.0;
            for batch in nn::epoch_batches(inputs.nrows(), config.batch_size, &mut shuffle) {
                let x = nn::gather_rows(inputs, &batch);
                let y = nn::gather_labels(labels, &batch);
                let masks: Option<Vec<DropoutMask>> = (self.spec.dropout_rate() > 0.0).then(|| {
                    (0..m)
                        .map(|_| DropoutMask::sample(&self.spec, x.nrows(), &mut dropout))
                        .collect()
                });
                let (loss, grads) =
                    self.joint_loss_masked(x.view(), &y, config.anchor_coefficient, masks.as_deref())?;
                total += loss * batch.len() as f64;
                for (i, g) in grads.iter().enumerate() {
                    joint_grad[i * p..(i + 1) * p].copy_from_slice(&g.0);
                }
                adam.step(&mut joint, &joint_grad);
                for (i, theta) in self.members.iter_mut().enumerate() {
                    theta.0.copy_from_slice(&joint[i * p..(i + 1) * p]);
                }
                report.steps += 1;
            }
            report.epoch_losses.push(total / inputs.nrows() as f64);
        }
        Ok(report)
    }

    fn fit_independent(
        &mut self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        config: &JointTrainConfig,
    ) -> Result<TrainReport, EnsembleError> {
        let mut report = TrainReport {
            epoch_losses: vec![0.0; config.epochs],
            steps: 0,
        };
        for (i, theta) in self.members.iter_mut().enumerate() {
            let seed = rng::derive_seed(config.seed, &[i as u64]);
            let (trained, trace) = nn::train_network(
                &self.spec,
                theta.clone(),
                config.adam,
                inputs,
                labels,
                config.epochs,
                config.batch_size,
                seed,
            )?;
            *theta = trained;
            for (acc, l) in report.epoch_losses.iter_mut().zip(trace) {
                *acc += l;
            }
            report.steps += config.epochs * inputs.nrows().div_ceil(config.batch_size.max(1));
        }
        Ok(report)
    }

    /// Member class probabilities for a batch, without dropout.
    pub fn predict_members(&self, x: ArrayView2<f64>) -> Result<PredictiveDistribution, EnsembleError> {
        let per_member = self
            .members
            .iter()
            .map(|theta| nn::forward(&self.spec, theta, x, None).map(|l| nn::softmax(l.view())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PredictiveDistribution::from_members(&per_member))
    }

    /// MC-dropout predictive distribution of one member: each row is one
    /// stochastic pass.
    pub fn predict_mc_dropout(
        &self,
        member: usize,
        x: ArrayView2<f64>,
        passes: usize,
        seed: u64,
    ) -> Result<PredictiveDistribution, EnsembleError> {
        let runs = nn::mc_dropout_passes(&self.spec, &self.members[member], x, passes, seed)?;
        Ok(PredictiveDistribution::from_members(&runs))
    }

    /// Penultimate-layer activations of the first member.
    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Tensor, EnsembleError> {
        Ok(nn::embed(&self.spec, &self.members[0], x)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnsembleError> {
        let header = EnsembleHeader {
            kind: "ensemble".into(),
            spec: self.spec.clone(),
            mode: self.mode,
            prior: self.prior,
            members: self.members.len(),
            params_per_member: self.spec.num_params(),
        };
        let vectors: Vec<&[f64]> = self
            .members
            .iter()
            .chain(&self.anchors)
            .map(ParamVector::as_slice)
            .collect();
        checkpoint::save(path, &header, &vectors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let (header, mut vectors): (EnsembleHeader, _) = checkpoint::load(path)?;
        if header.kind != "ensemble" {
            return Err(CheckpointError::Invalid(format!("expected ensemble, found {}", header.kind)).into());
        }
        if vectors.len() != 2 * header.members
            || vectors.iter().any(|v| v.len() != header.spec.num_params())
        {
            return Err(CheckpointError::Invalid("vector count or length mismatch".into()).into());
        }
        let anchors = vectors.split_off(header.members);
        Ok(Self {
            spec: header.spec,
            mode: header.mode,
            prior: header.prior,
            members: vectors.into_iter().map(ParamVector).collect(),
            anchors: anchors.into_iter().map(ParamVector).collect(),
        })
    }
}

/// Train per retrain mode: `Scratch` re-draws members from the prior first.
pub fn train(
    model: &EnsembleModel,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    config: &JointTrainConfig,
    mode: RetrainMode,
) -> Result<(EnsembleModel, TrainReport), EnsembleError> {
    if inputs.nrows() == 0 {
        return Err(EnsembleError::EmptyLabeledSet);
    }
    let mut next = match mode {
        RetrainMode::Scratch => model.reinitialized(config.seed)?,
        RetrainMode::Incremental => model.clone(),
    };
    let report = next.fit(inputs, labels, config)?;
    Ok((next, report))
}

pub fn accuracy(model: &EnsembleModel, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, EnsembleError> {
    let mean = ensemble_mean(&model.predict_members(x)?);
    Ok(nn::accuracy(mean.view(), labels))
}

pub fn mean_probs(model: &EnsembleModel, x: ArrayView2<f64>) -> Result<Array2<f64>, EnsembleError> {
    Ok(ensemble_mean(&model.predict_members(x)?))
}
