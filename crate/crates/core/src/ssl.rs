//! Whitening-based self-supervised pretraining.
//!
//! Two augmented views of every sample pass through an encoder `E` and a
//! projection head `g`. Each view batch is ZCA-whitened,
//! `W = (Cov + eps I)^(-1/2)`, and the loss is the mean squared distance
//! between the whitened rows of the two views. The gradient flows through
//! the symmetric eigendecomposition. After pretraining the encoder is frozen
//! and only fully connected classifier heads are trained on top of it.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::SslConfig;
use crate::nn::{self, Activation, AdamConfig, AdamState, NetworkSpec, NnError, ParamVector, Tensor};
use crate::rng::{self, stream, Rng};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("embeddings contain non-finite values")]
    NonFinite,
    #[error("whitening needs more rows ({rows}) than dimensions ({dim})")]
    BatchTooSmall { rows: usize, dim: usize },
    #[error("view batches differ in shape")]
    ShapeMismatch,
    #[error("empty pretraining pool")]
    EmptyPool,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Zero padding for random pad-and-crop; crops are translations within it.
    pub crop_pad: usize,
    pub crop_probability: f64,
    pub flip_probability: f64,
    pub noise_std: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            crop_probability: 1.0,
            flip_probability: 0.0,
            noise_std: 0.05,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            crop_pad: 0,
            crop_probability: 0.0,
            flip_probability: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.crop_probability) {
            return Err("crop_probability must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err("flip_probability must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err("noise_std must be nonnegative".into());
        }
        Ok(())
    }
}

fn augment_into(
    x: ArrayView1<f64>,
    image_shape: Option<(usize, usize)>,
    config: &AugmentationConfig,
    rng: &mut Rng,
    out: &mut [f64],
) {
    let crop = rng.random::<f64>() < config.crop_probability && config.crop_pad > 0;
    let pad = config.crop_pad as i64;
    let dy = rng.random_range(-pad..=pad);
    let dx = rng.random_range(-pad..=pad);
    let flip = rng.random::<f64>() < config.flip_probability;
    match image_shape {
        Some((rows, cols)) if crop || flip => {
            let (rows_i, cols_i) = (rows as i64, cols as i64);
            for r in 0..rows_i {
                for c in 0..cols_i {
                    let (mut sr, mut sc) = (r, c);
                    if crop {
                        sr += dy;
                        sc += dx;
                    }
                    if flip {
                        sc = cols_i - 1 - sc;
                    }
                    out[(r * cols_i + c) as usize] = if (0..rows_i).contains(&sr) && (0..cols_i).contains(&sc) {
                        x[(sr * cols_i + sc) as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        _ => out.iter_mut().zip(x.iter()).for_each(|(o, &v)| *o = v),
    }
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).expect("validated std");
        out.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

/// Two independently augmented views of one sample.
pub fn augment_pair(
    x: ArrayView1<f64>,
    image_shape: Option<(usize, usize)>,
    config: &AugmentationConfig,
    seed: u64,
) -> (Array1<f64>, Array1<f64>) {
    let mut rng = rng::seeded(seed);
    let mut a = Array1::zeros(x.len());
    let mut b = Array1::zeros(x.len());
    augment_into(x, image_shape, config, &mut rng, a.as_slice_mut().unwrap());
    augment_into(x, image_shape, config, &mut rng, b.as_slice_mut().unwrap());
    (a, b)
}

/// Augment every row of a batch twice.
pub fn augment_batch(
    x: ArrayView2<f64>,
    image_shape: Option<(usize, usize)>,
    config: &AugmentationConfig,
    seed: u64,
) -> (Tensor, Tensor) {
    let mut rng = rng::seeded(seed);
    let mut a = Array2::zeros(x.dim());
    let mut b = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        augment_into(row, image_shape, config, &mut rng, a.row_mut(i).into_slice().unwrap());
        augment_into(row, image_shape, config, &mut rng, b.row_mut(i).into_slice().unwrap());
    }
    (a, b)
}

fn to_na(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Batch statistics and ZCA matrix, plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct WhiteningState {
    pub mean: Array1<f64>,
    pub matrix: Array2<f64>,
    centered: Array2<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: Array2<f64>,
    ridge: f64,
}

/// Unbiased batch covariance.
pub fn covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = nn::column_mean(x);
    let centered = &x - &mean;
    centered.t().dot(&centered) / (x.nrows() as f64 - 1.0)
}

impl WhiteningState {
    pub fn fit(z: ArrayView2<f64>, ridge: f64) -> Result<Self, SslError> {
        let (n, d) = z.dim();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SslError::NonFinite);
        }
        if n <= d {
            return Err(SslError::BatchTooSmall { rows: n, dim: d });
        }
        let mean = nn::column_mean(z);
        let centered = &z - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(to_na(&cov));
        let eigenvectors = from_na(&eig.eigenvectors);
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let inv_sqrt = Array1::from_iter(eigenvalues.iter().map(|&l| (l + ridge).powf(-0.5)));
        if inv_sqrt.iter().any(|v| !v.is_finite()) {
            return Err(SslError::NonFinite);
        }
        let matrix = (&eigenvectors * &inv_sqrt).dot(&eigenvectors.t());
        Ok(Self {
            mean,
            matrix,
            centered,
            eigenvalues,
            eigenvectors,
            ridge,
        })
    }

    pub fn whitened(&self) -> Tensor {
        self.centered.dot(&self.matrix)
    }

    pub fn apply(&self, z: ArrayView2<f64>) -> Tensor {
        (&z - &self.mean).dot(&self.matrix)
    }

    /// Gradient w.r.t. the raw batch given the gradient w.r.t. the whitened batch.
    pub fn backward(&self, grad_whitened: ArrayView2<f64>) -> Tensor {
        let n = self.centered.nrows() as f64;
        let f = |l: f64| (l + self.ridge).powf(-0.5);
        let df = |l: f64| -0.5 * (l + self.ridge).powf(-1.5);
        let grad_matrix = self.centered.t().dot(&grad_whitened);
        let mut grad_centered = grad_whitened.dot(&self.matrix);
        let u = &self.eigenvectors;
        let mut inner = u.t().dot(&grad_matrix).dot(u);
        let lam = &self.eigenvalues;
        for i in 0..lam.len() {
            for j in 0..lam.len() {
                let gap = lam[i] - lam[j];
                let k = if gap.abs() > 1e-12 * lam[i].abs().max(lam[j].abs()).max(1e-300) {
                    (f(lam[i]) - f(lam[j])) / gap
                } else {
                    df(0.5 * (lam[i] + lam[j]))
                };
                inner[[i, j]] *= k;
            }
        }
        let grad_cov = u.dot(&inner).dot(&u.t());
        let grad_cov_sym = (&grad_cov + &grad_cov.t()) * 0.5;
        grad_centered += &(self.centered.dot(&grad_cov_sym) * (2.0 / (n - 1.0)));
        let mean = grad_centered.mean_axis(Axis(0)).expect("nonempty batch");
        grad_centered - &mean
    }
}

/// ZCA-whiten a batch of embeddings.
pub fn whiten(z: ArrayView2<f64>, ridge: f64) -> Result<Tensor, SslError> {
    Ok(WhiteningState::fit(z, ridge)?.whitened())
}

/// Mean over rows of the squared distance between the whitened views.
pub fn ssl_loss(view1: ArrayView2<f64>, view2: ArrayView2<f64>, ridge: f64) -> Result<f64, SslError> {
    Ok(ssl_loss_and_grad(view1, view2, ridge)?.0)
}

pub fn ssl_loss_and_grad(
    view1: ArrayView2<f64>,
    view2: ArrayView2<f64>,
    ridge: f64,
) -> Result<(f64, Tensor, Tensor), SslError> {
    if view1.dim() != view2.dim() {
        return Err(SslError::ShapeMismatch);
    }
    let w1 = WhiteningState::fit(view1, ridge)?;
    let w2 = WhiteningState::fit(view2, ridge)?;
    let diff = w1.whitened() - w2.whitened();
    let n = view1.nrows() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let g = diff * (2.0 / n);
    let g1 = w1.backward(g.view());
    let g2 = w2.backward((-&g).view());
    Ok((loss, g1, g2))
}

/// Encoder `E` and projection head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHead {
    pub encoder_spec: NetworkSpec,
    pub encoder: ParamVector,
    pub projection_spec: NetworkSpec,
    pub projection: ParamVector,
}

impl EncoderHead {
    pub fn new(input_dim: usize, config: &SslConfig, seed: u64) -> Result<Self, SslError> {
        let mut widths = vec![input_dim];
        widths.extend(&config.encoder_hidden);
        widths.push(config.embedding_dim);
        let encoder_spec = NetworkSpec::embedding(widths, Activation::Relu)?;
        let projection_spec = NetworkSpec::embedding(
            vec![config.embedding_dim, config.projection_hidden, config.projection_dim],
            Activation::Relu,
        )?;
        Ok(Self {
            encoder: nn::xavier_init(&encoder_spec, rng::derive_seed(seed, &[0])),
            projection: nn::xavier_init(&projection_spec, rng::derive_seed(seed, &[1])),
            encoder_spec,
            projection_spec,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder_spec.output_dim()
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Tensor, SslError> {
        Ok(nn::forward(&self.encoder_spec, &self.encoder, x, None)?)
    }

    pub fn project(&self, x: ArrayView2<f64>) -> Result<Tensor, SslError> {
        let h = self.encode(x)?;
        Ok(nn::forward(&self.projection_spec, &self.projection, h.view(), None)?)
    }

    /// Loss of one pair of view batches and the gradients of both networks.
    fn loss_and_grad(
        &self,
        view1: ArrayView2<f64>,
        view2: ArrayView2<f64>,
        ridge: f64,
    ) -> Result<(f64, ParamVector, ParamVector), SslError> {
        let (h1, ec1) = nn::forward_cached(&self.encoder_spec, &self.encoder, view1, None)?;
        let (h2, ec2) = nn::forward_cached(&self.encoder_spec, &self.encoder, view2, None)?;
        let (z1, pc1) = nn::forward_cached(&self.projection_spec, &self.projection, h1.view(), None)?;
        let (z2, pc2) = nn::forward_cached(&self.projection_spec, &self.projection, h2.view(), None)?;
        let (loss, g1, g2) = ssl_loss_and_grad(z1.view(), z2.view(), ridge)?;
        let (mut gp, gh1) = nn::backward(&self.projection_spec, &self.projection, &pc1, g1.view());
        let (gp2, gh2) = nn::backward(&self.projection_spec, &self.projection, &pc2, g2.view());
        let (mut ge, _) = nn::backward(&self.encoder_spec, &self.encoder, &ec1, gh1.view());
        let (ge2, _) = nn::backward(&self.encoder_spec, &self.encoder, &ec2, gh2.view());
        gp.0.iter_mut().zip(&gp2.0).for_each(|(a, b)| *a += b);
        ge.0.iter_mut().zip(&ge2.0).for_each(|(a, b)| *a += b);
        Ok((loss, ge, gp))
    }

    /// SSL loss of a fixed pair of view batches.
    pub fn evaluate(&self, view1: ArrayView2<f64>, view2: ArrayView2<f64>, ridge: f64) -> Result<f64, SslError> {
        let z1 = self.project(view1)?;
        let z2 = self.project(view2)?;
        ssl_loss(z1.view(), z2.view(), ridge)
    }

    pub fn freeze(&self) -> FrozenEncoder {
        FrozenEncoder {
            spec: self.encoder_spec.clone(),
            params: self.encoder.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Loss on the held-out augmented batch before and after training.
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

/// Pretrain encoder and projection on an unlabeled pool. A fixed augmented
/// batch is held out to measure progress. Incomplete batches are dropped.
pub fn pretrain(
    head: &EncoderHead,
    pool: ArrayView2<f64>,
    image_shape: Option<(usize, usize)>,
    config: &SslConfig,
    seed: u64,
) -> Result<(EncoderHead, PretrainReport), SslError> {
    let n = pool.nrows();
    if n == 0 {
        return Err(SslError::EmptyPool);
    }
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, &[0])));
    let (holdout_idx, train_idx) = if n >= 2 * batch {
        order.split_at(batch)
    } else {
        (&order[..], &order[..])
    };
    let holdout = nn::gather_rows(pool, holdout_idx);
    let (hv1, hv2) = augment_batch(holdout.view(), image_shape, &config.augment, rng::derive_seed(seed, &[1]));
    let train = nn::gather_rows(pool, train_idx);

    let mut head = head.clone();
    let mut report = PretrainReport {
        initial_holdout_loss: head.evaluate(hv1.view(), hv2.view(), config.ridge)?,
        ..Default::default()
    };
    let enc_len = head.encoder.len();
    let mut joint: Vec<f64> = head.encoder.0.iter().chain(&head.projection.0).copied().collect();
    let mut adam = AdamState::new(
        joint.len(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut shuffle = rng::seeded(rng::derive_seed(seed, &[stream::TRAIN]));
    let mut grad = vec![0.0; joint.len()];
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in nn::epoch_batches(train.nrows(), batch, &mut shuffle).into_iter().enumerate() {
            if idx.len() < batch || idx.len() <= config.projection_dim {
                continue;
            }
            let x = nn::gather_rows(train.view(), &idx);
            let aug_seed = rng::derive_seed(seed, &[stream::AUGMENT, epoch as u64, b as u64]);
            let (v1, v2) = augment_batch(x.view(), image_shape, &config.augment, aug_seed);
            let (loss, ge, gp) = head.loss_and_grad(v1.view(), v2.view(), config.ridge)?;
            grad[..enc_len].copy_from_slice(&ge.0);
            grad[enc_len..].copy_from_slice(&gp.0);
            adam.step(&mut joint, &grad);
            head.encoder.0.copy_from_slice(&joint[..enc_len]);
            head.projection.0.copy_from_slice(&joint[enc_len..]);
            total += loss;
            batches += 1;
        }
        report.epoch_losses.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    report.final_holdout_loss = head.evaluate(hv1.view(), hv2.view(), config.ridge)?;
    Ok((head, report))
}

/// An encoder whose parameters can no longer change.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    spec: NetworkSpec,
    params: ParamVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderHeader {
    kind: String,
    spec: NetworkSpec,
    frozen: bool,
}

impl FrozenEncoder {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Tensor, SslError> {
        Ok(nn::forward(&self.spec, &self.params, x, None)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SslError> {
        let header = EncoderHeader {
            kind: "encoder".into(),
            spec: self.spec.clone(),
            frozen: true,
        };
        checkpoint::save(path, &header, &[self.params.as_slice()])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SslError> {
        let (header, mut vectors): (EncoderHeader, Vec<Vec<f64>>) = checkpoint::load(path)?;
        if header.kind != "encoder" || !header.frozen {
            return Err(CheckpointError::Invalid("expected a frozen encoder checkpoint".into()).into());
        }
        if vectors.len() != 1 || vectors[0].len() != header.spec.num_params() {
            return Err(CheckpointError::Invalid("encoder parameter length mismatch".into()).into());
        }
        Ok(Self {
            spec: header.spec,
            params: ParamVector(vectors.remove(0)),
        })
    }
}

/// Gradient of a frozen-encoder classifier. The encoder part is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrad {
    pub encoder: ParamVector,
    pub head: ParamVector,
}

/// Trainable fully connected head over a shared frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenClassifier {
    pub encoder: Arc<FrozenEncoder>,
    pub head_spec: NetworkSpec,
    pub head: ParamVector,
}

pub fn build_classifier(
    encoder: Arc<FrozenEncoder>,
    num_classes: usize,
    head_hidden: &[usize],
    seed: u64,
) -> Result<FrozenClassifier, SslError> {
    let mut widths = vec![encoder.embedding_dim()];
    widths.extend(head_hidden);
    widths.push(num_classes);
    let head_spec = NetworkSpec::new(widths, Activation::Relu, 0.0)?;
    Ok(FrozenClassifier {
        head: nn::xavier_init(&head_spec, rng::derive_seed(seed, &[stream::HEAD])),
        head_spec,
        encoder,
    })
}

impl FrozenClassifier {
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, ClassifierGrad), SslError> {
        let features = self.encoder.encode(x)?;
        let (loss, head) = nn::loss_and_grad(&self.head_spec, &self.head, features.view(), labels)?;
        Ok((
            loss,
            ClassifierGrad {
                encoder: ParamVector::zeros(self.encoder.params().len()),
                head,
            },
        ))
    }

    /// Train only the head. Returns per-epoch losses.
    pub fn train_head(
        &mut self,
        x: ArrayView2<f64>,
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Vec<f64>, SslError> {
        let features = self.encoder.encode(x)?;
        let (head, trace) = nn::train_network(
            &self.head_spec,
            self.head.clone(),
            adam,
            features.view(),
            labels,
            epochs,
            batch_size,
            seed,
        )?;
        self.head = head;
        Ok(trace)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Tensor, SslError> {
        let features = self.encoder.encode(x)?;
        let logits = nn::forward(&self.head_spec, &self.head, features.view(), None)?;
        Ok(nn::softmax(logits.view()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
    }

    fn correlated(rows: usize, cols: usize, seed: u64) -> Tensor {
        let base = gaussian(rows, cols, seed);
        let mix = gaussian(cols, cols, seed + 1000) + Array2::<f64>::eye(cols) * 2.0;
        base.dot(&mix) + 3.0
    }

    fn frobenius_from_identity(x: &Tensor) -> f64 {
        let c = covariance(x.view());
        (&c - &Array2::<f64>::eye(c.nrows())).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn whitened_batch_has_identity_statistics() {
        let z = correlated(200, 6, 1);
        let w = whiten(z.view(), 0.0).unwrap();
        let mean = nn::column_mean(w.view());
        assert!(mean.iter().all(|m| m.abs() < 1e-8));
        assert!(frobenius_from_identity(&w) < 1e-6);
    }

    #[test]
    fn white_input_gives_near_identity_matrix() {
        let z = gaussian(10_000, 4, 2);
        let state = WhiteningState::fit(z.view(), 0.0).unwrap();
        let dev = (&state.matrix - &Array2::<f64>::eye(4)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(dev < 0.05, "{dev}");
    }

    #[test]
    fn scalar_whitening_standardises() {
        let z = correlated(50, 1, 3);
        let w = whiten(z.view(), 0.0).unwrap();
        let mean = w.sum() / 50.0;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_batch_needs_ridge() {
        let row = gaussian(1, 3, 4);
        let z = ndarray::concatenate(Axis(0), &vec![row.view(); 10]).unwrap();
        assert!(whiten(z.view(), 0.0).is_err());
        let w = whiten(z.view(), 1e-5).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn whitening_errors() {
        assert!(matches!(whiten(gaussian(3, 3, 0).view(), 1e-5), Err(SslError::BatchTooSmall { .. })));
        let mut z = gaussian(10, 2, 0);
        z[[0, 0]] = f64::NAN;
        assert!(matches!(whiten(z.view(), 1e-5), Err(SslError::NonFinite)));
    }

    #[test]
    fn whitening_matrix_is_inverse_square_root() {
        let z = correlated(40, 3, 5);
        let state = WhiteningState::fit(z.view(), 1e-3).unwrap();
        let cov = covariance(z.view()) + Array2::<f64>::eye(3) * 1e-3;
        let back = state.matrix.dot(&cov).dot(&state.matrix);
        for (a, b) in back.iter().zip(Array2::<f64>::eye(3).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // cross-check against nalgebra's own symmetric square root
        let na = DMatrix::from_fn(3, 3, |i, j| cov[[i, j]]);
        let inv = na.try_inverse().unwrap();
        let w2 = state.matrix.dot(&state.matrix);
        for i in 0..3 {
            for j in 0..3 {
                assert!((w2[[i, j]] - inv[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identical_views_have_zero_loss() {
        let z = correlated(20, 3, 6);
        assert!(ssl_loss(z.view(), z.view(), 1e-5).unwrap().abs() < 1e-24);
        assert!(ssl_loss(z.view(), correlated(20, 3, 7).view(), 1e-5).unwrap() > 0.0);
        assert!(matches!(
            ssl_loss(z.view(), correlated(21, 3, 7).view(), 1e-5),
            Err(SslError::ShapeMismatch)
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let z1 = correlated(8, 3, 8);
        let z2 = &z1 + &(gaussian(8, 3, 9) * 0.5);
        for ridge in [0.0, 1e-5] {
            let (_, g1, g2) = ssl_loss_and_grad(z1.view(), z2.view(), ridge).unwrap();
            let h = 1e-6;
            for (which, grad) in [(0, &g1), (1, &g2)] {
                for i in 0..8 {
                    for j in 0..3 {
                        let eval = |delta: f64| {
                            let (mut a, mut b) = (z1.clone(), z2.clone());
                            if which == 0 {
                                a[[i, j]] += delta;
                            } else {
                                b[[i, j]] += delta;
                            }
                            ssl_loss(a.view(), b.view(), ridge).unwrap()
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        let an = grad[[i, j]];
                        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn loss_is_rotation_invariant() {
        let z1 = correlated(30, 4, 10);
        let z2 = &z1 + &(gaussian(30, 4, 11) * 0.3);
        let q = SymmetricEigen::new({
            let a = to_na(&gaussian(4, 4, 12));
            &a + a.transpose()
        })
        .eigenvectors;
        let r = from_na(&q);
        let base = ssl_loss(z1.view(), z2.view(), 1e-5).unwrap();
        let rotated = ssl_loss(z1.dot(&r).view(), z2.dot(&r).view(), 1e-5).unwrap();
        assert!((base - rotated).abs() < 1e-6, "{base} vs {rotated}");
    }

    #[test]
    fn identity_augmentation_returns_input() {
        let x = Array1::from_iter((0..16).map(|v| v as f64 / 16.0));
        let (a, b) = augment_pair(x.view(), Some((4, 4)), &AugmentationConfig::identity(), 3);
        assert_eq!(a, x);
        assert_eq!(b, x);
        let cfg = AugmentationConfig::default();
        assert_eq!(augment_pair(x.view(), Some((4, 4)), &cfg, 5), augment_pair(x.view(), Some((4, 4)), &cfg, 5));
    }

    #[test]
    fn crop_is_a_zero_filled_translation() {
        let x = Array1::from_iter((1..=9).map(|v| v as f64));
        let cfg = AugmentationConfig {
            crop_pad: 1,
            crop_probability: 1.0,
            flip_probability: 0.0,
            noise_std: 0.0,
        };
        for seed in 0..20 {
            let (a, _) = augment_pair(x.view(), Some((3, 3)), &cfg, seed);
            // every nonzero output pixel is an input pixel, order preserved
            let kept: Vec<f64> = a.iter().copied().filter(|&v| v != 0.0).collect();
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            assert!(kept.len() >= 4);
        }
        let flip = AugmentationConfig {
            flip_probability: 1.0,
            ..AugmentationConfig::identity()
        };
        let (f, _) = augment_pair(x.view(), Some((3, 3)), &flip, 0);
        assert_eq!(f.to_vec(), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0, 9.0, 8.0, 7.0]);
    }

    #[test]
    fn noise_moments_match_gaussian() {
        let x = Array1::from_elem(50, 0.5);
        let cfg = AugmentationConfig {
            noise_std: 0.1,
            ..AugmentationConfig::identity()
        };
        let mut abs_dev = 0.0;
        let mut signed = 0.0;
        let draws = 1000;
        for seed in 0..draws {
            let (a, _) = augment_pair(x.view(), None, &cfg, seed);
            abs_dev += (&a - &x).mapv(f64::abs).sum();
            signed += (&a - &x).sum();
        }
        let count = (draws * 50) as f64;
        let sigma = 0.1;
        let expected_abs = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let sd_abs = sigma * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / count.sqrt();
        assert!((abs_dev / count - expected_abs).abs() < 3.0 * sd_abs);
        assert!((signed / count).abs() < 3.0 * sigma / count.sqrt());
    }

    fn tiny_config() -> SslConfig {
        SslConfig {
            encoder_hidden: vec![16],
            embedding_dim: 8,
            projection_hidden: 16,
            projection_dim: 4,
            head_hidden: vec![],
            epochs: 0,
            batch_size: 32,
            pool_size: None,
            learning_rate: 1e-3,
            ridge: 1e-5,
            augment: AugmentationConfig {
                noise_std: 0.3,
                ..AugmentationConfig::identity()
            },
        }
    }

    #[test]
    fn zero_epochs_leave_encoder_unchanged() {
        let pool = gaussian(100, 6, 1);
        let head = EncoderHead::new(6, &tiny_config(), 2).unwrap();
        let (after, report) = pretrain(&head, pool.view(), None, &tiny_config(), 3).unwrap();
        assert_eq!(after, head);
        assert_eq!(report.initial_holdout_loss, report.final_holdout_loss);
        assert!(matches!(
            pretrain(&head, pool.slice(ndarray::s![..0, ..]), None, &tiny_config(), 3),
            Err(SslError::EmptyPool)
        ));
    }

    #[test]
    fn pretraining_reduces_holdout_loss_and_is_deterministic() {
        let pool = correlated(400, 6, 1);
        let cfg = SslConfig {
            epochs: 10,
            ..tiny_config()
        };
        let head = EncoderHead::new(6, &cfg, 2).unwrap();
        let (a, report) = pretrain(&head, pool.view(), None, &cfg, 3).unwrap();
        assert!(report.final_holdout_loss < report.initial_holdout_loss, "{report:?}");
        let (b, _) = pretrain(&head, pool.view(), None, &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_classifier_contracts() {
        let head = EncoderHead::new(6, &tiny_config(), 2).unwrap();
        let encoder = Arc::new(head.freeze());
        let before = encoder.params().clone();
        let x = gaussian(40, 6, 5);
        let y: Vec<usize> = (0..40).map(|i| (x[[i, 0]] > 0.0) as usize).collect();
        let mut c1 = build_classifier(encoder.clone(), 2, &[], 1).unwrap();
        let c2 = build_classifier(encoder.clone(), 2, &[], 2).unwrap();
        assert_eq!(c1.encoder, c2.encoder);
        assert_ne!(c1.head, c2.head);
        let (_, grad) = c1.loss_and_grad(x.view(), &y).unwrap();
        assert!(grad.encoder.0.iter().all(|&g| g == 0.0));
        assert!(grad.head.0.iter().any(|&g| g != 0.0));
        let head_before = c1.head.clone();
        c1.train_head(x.view(), &y, 20, 8, AdamConfig::default(), 0).unwrap();
        assert_ne!(c1.head, head_before);
        assert_eq!(c1.encoder.params(), &before);
        let p = c1.predict(x.view()).unwrap();
        assert_eq!(p.dim(), (40, 2));
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let head = EncoderHead::new(6, &tiny_config(), 2).unwrap();
        let frozen = head.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        frozen.save(&path).unwrap();
        assert_eq!(FrozenEncoder::load(&path).unwrap(), frozen);
    }
}
