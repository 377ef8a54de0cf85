//! Dense multilayer perceptron with analytic backpropagation, Adam,
//! Xavier initialisation and inverted dropout.
//!
//! Parameters of a network live in one flat [`ParamVector`]. Layer `l`
//! stores its weight matrix (`fan_in x fan_out`, row-major) followed by its
//! bias vector. Hidden layers apply the configured activation; the output
//! layer is linear and produces logits.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

/// Row-major batch of real values, one sample per row.
pub type Tensor = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
}

/// Location of one dense layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl NetworkSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self, NnError> {
        if layer_widths.len() < 2 {
            return Err(NnError::InvalidSpec("at least two layer widths required".into()));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec("layer widths must be positive".into()));
        }
        if *layer_widths.last().unwrap() < 2 {
            return Err(NnError::InvalidSpec("at least two output classes required".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
            dropout_rate,
        })
    }

    /// Like [`NetworkSpec::new`] but allows a single output unit, for
    /// regression-style heads such as projection networks.
    pub fn embedding(layer_widths: Vec<usize>, activation: Activation) -> Result<Self, NnError> {
        if layer_widths.len() < 2 || layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec(
                "at least two positive layer widths required".into(),
            ));
        }
        Ok(Self {
            layer_widths,
            activation,
            dropout_rate: 0.0,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidSpec(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.output_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Width of the last hidden layer, or the input width for a network
    /// without hidden layers.
    pub fn embedding_dim(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 2]
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layout = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                layout
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn check_params(&self, params: &ParamVector) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} parameters", self.num_params()),
                found: format!("{} parameters", params.len()),
            });
        }
        Ok(())
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<(), NnError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} input columns", self.input_dim()),
                found: format!("{} columns", batch.ncols()),
            });
        }
        Ok(())
    }
}

/// Flat weights and biases of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn weights(&self, layer: &LayerLayout) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.fan_in, layer.fan_out),
            &self.0[layer.weight_offset..layer.bias_offset],
        )
        .expect("layout matches spec")
    }

    fn bias(&self, layer: &LayerLayout) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[layer.bias_offset..layer.bias_offset + layer.fan_out])
    }
}

/// Xavier-uniform weights, zero biases.
pub fn xavier_init(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = rng::seeded(seed);
    let mut params = ParamVector::zeros(spec.num_params());
    for layer in spec.layers() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut params.0[layer.weight_offset..layer.bias_offset] {
            *w = dist.sample(&mut rng);
        }
    }
    params
}

/// Every coordinate drawn i.i.d. from `N(mean, variance)`.
pub fn gaussian_init(spec: &NetworkSpec, mean: f64, variance: f64, rng: &mut Rng) -> ParamVector {
    let normal = Normal::new(mean, variance.sqrt()).expect("nonnegative variance");
    ParamVector((0..spec.num_params()).map(|_| normal.sample(rng)).collect())
}

/// Inverted-dropout keep masks, one `rows x width` matrix per hidden layer.
/// Entries are either `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Array2<f64>>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn sample(spec: &NetworkSpec, rows: usize, rng: &mut Rng) -> Self {
        let rate = spec.dropout_rate;
        let scale = 1.0 / (1.0 - rate);
        let widths = &spec.layer_widths[1..spec.layer_widths.len() - 1];
        let layers = widths
            .iter()
            .map(|&w| {
                Array2::from_shape_fn((rows, w), |_| {
                    if rate == 0.0 || rng.random::<f64>() >= rate {
                        scale
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { layers, scale }
    }

    /// Mask that keeps every unit; with rate 0 the scale is 1.
    pub fn keep_all(spec: &NetworkSpec, rows: usize) -> Self {
        let scale = 1.0 / (1.0 - spec.dropout_rate);
        let widths = &spec.layer_widths[1..spec.layer_widths.len() - 1];
        Self {
            layers: widths.iter().map(|&w| Array2::from_elem((rows, w), scale)).collect(),
            scale,
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation and activation of each hidden layer.
    hidden: Vec<(Array2<f64>, Array2<f64>)>,
    masks: Option<DropoutMask>,
}

fn affine(input: &ArrayView2<f64>, params: &ParamVector, layer: &LayerLayout) -> Array2<f64> {
    let mut out = input.dot(&params.weights(layer));
    out += &params.bias(layer);
    out
}

pub fn forward_cached(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: ArrayView2<f64>,
    mask: Option<&DropoutMask>,
) -> Result<(Tensor, ForwardCache), NnError> {
    spec.check_params(params)?;
    spec.check_input(&batch)?;
    let layers = spec.layers();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut hidden = Vec::with_capacity(layers.len() - 1);
    let mut current = batch.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let z = affine(&current.view(), params, layer);
        inputs.push(current);
        if l + 1 == layers.len() {
            return Ok((
                z,
                ForwardCache {
                    inputs,
                    hidden,
                    masks: mask.cloned(),
                },
            ));
        }
        let act = spec.activation;
        let h = z.mapv(|v| act.apply(v));
        let mut next = h.clone();
        if let Some(mask) = mask {
            next *= &mask.layers[l];
        }
        hidden.push((z, h));
        current = next;
    }
    unreachable!("network has at least one layer")
}

/// Logits of a batch, optionally with a dropout mask applied to hidden units.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: ArrayView2<f64>,
    mask: Option<&DropoutMask>,
) -> Result<Tensor, NnError> {
    spec.check_params(params)?;
    spec.check_input(&batch)?;
    let layers = spec.layers();
    let mut current = batch.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = affine(&current.view(), params, layer);
        if l + 1 < layers.len() {
            let act = spec.activation;
            z.mapv_inplace(|v| act.apply(v));
            if let Some(mask) = mask {
                z *= &mask.layers[l];
            }
        }
        current = z;
    }
    Ok(current)
}

/// Activations of the last hidden layer (no dropout).
pub fn embed(spec: &NetworkSpec, params: &ParamVector, batch: ArrayView2<f64>) -> Result<Tensor, NnError> {
    spec.check_params(params)?;
    spec.check_input(&batch)?;
    let layers = spec.layers();
    let mut current = batch.to_owned();
    for layer in &layers[..layers.len() - 1] {
        let mut z = affine(&current.view(), params, layer);
        let act = spec.activation;
        z.mapv_inplace(|v| act.apply(v));
        current = z;
    }
    Ok(current)
}

/// Gradients of a scalar objective given its gradient w.r.t. the network
/// output. Returns the parameter gradient and the gradient w.r.t. the input.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    grad_output: ArrayView2<f64>,
) -> (ParamVector, Tensor) {
    let layers = spec.layers();
    let mut grad = ParamVector::zeros(spec.num_params());
    let mut upstream = grad_output.to_owned();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        if l + 1 < layers.len() {
            // upstream is currently d/d(masked activation) of hidden layer l
            let (z, h) = &cache.hidden[l];
            if let Some(mask) = &cache.masks {
                upstream *= &mask.layers[l];
            }
            let act = spec.activation;
            Zip::from(&mut upstream)
                .and(z)
                .and(h)
                .for_each(|g, &z, &h| *g *= act.derivative(z, h));
        }
        let input = &cache.inputs[l];
        {
            let mut dw = ArrayViewMut2::from_shape(
                (layer.fan_in, layer.fan_out),
                &mut grad.0[layer.weight_offset..layer.bias_offset],
            )
            .expect("layout matches spec");
            dw.assign(&input.t().dot(&upstream));
        }
        let db = upstream.sum_axis(Axis(0));
        grad.0[layer.bias_offset..layer.bias_offset + layer.fan_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));
        upstream = upstream.dot(&params.weights(layer).t());
    }
    (grad, upstream)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Tensor {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<(), NnError> {
    if labels.len() != rows {
        return Err(NnError::ShapeMismatch {
            expected: format!("{rows} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy of a batch and its analytic gradient.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, ParamVector), NnError> {
    loss_and_grad_masked(spec, params, batch, labels, None)
}

pub fn loss_and_grad_masked(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: ArrayView2<f64>,
    labels: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<(f64, ParamVector), NnError> {
    check_labels(labels, spec.num_classes(), batch.nrows())?;
    let (logits, cache) = forward_cached(spec, params, batch, mask)?;
    let n = batch.nrows() as f64;
    let mut loss = 0.0;
    let mut grad_out = softmax(logits.view());
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad_out[[i, label]] -= 1.0;
    }
    grad_out /= n;
    let (grad, _) = backward(spec, params, &cache, grad_out.view());
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// In-place Adam update with bias correction.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &ParamVector, grad: &ParamVector) -> (ParamVector, AdamState) {
    let mut next_state = state.clone();
    let mut next_params = params.clone();
    next_state.step(&mut next_params.0, &grad.0);
    (next_params, next_state)
}

/// Average of `passes` softmax outputs, each under a fresh dropout mask.
pub fn mc_dropout_predict(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    passes: usize,
    seed: u64,
) -> Result<Tensor, NnError> {
    mc_dropout_passes(spec, params, x, passes, seed).map(|runs| {
        let mut mean = Array2::zeros((x.nrows(), spec.num_classes()));
        for probs in &runs {
            mean += probs;
        }
        mean / passes as f64
    })
}

/// The individual softmax outputs behind [`mc_dropout_predict`].
pub fn mc_dropout_passes(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    passes: usize,
    seed: u64,
) -> Result<Vec<Tensor>, NnError> {
    assert!(passes >= 1, "at least one pass required");
    let mut rng = rng::seeded(seed);
    (0..passes)
        .map(|_| {
            let mask = DropoutMask::sample(spec, x.nrows(), &mut rng);
            forward(spec, params, x, Some(&mask)).map(|logits| softmax(logits.view()))
        })
        .collect()
}

/// Shuffled mini-batch index lists covering `0..n` once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn gather_rows(inputs: ArrayView2<f64>, rows: &[usize]) -> Tensor {
    inputs.select(Axis(0), rows)
}

pub fn gather_labels(labels: &[usize], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| labels[r]).collect()
}

/// Plain mini-batch Adam training of a single network. Returns the trained
/// parameters and the size-weighted mean loss of every epoch.
pub fn train_network(
    spec: &NetworkSpec,
    mut params: ParamVector,
    adam: AdamConfig,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParamVector, Vec<f64>), NnError> {
    check_labels(labels, spec.num_classes(), inputs.nrows())?;
    let mut state = AdamState::new(params.len(), adam);
    let mut shuffle = rng::seeded(rng::derive_seed(seed, &[rng::stream::TRAIN]));
    let mut dropout = rng::seeded(rng::derive_seed(seed, &[rng::stream::DROPOUT]));
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for batch in epoch_batches(inputs.nrows(), batch_size, &mut shuffle) {
            let x = gather_rows(inputs, &batch);
            let y = gather_labels(labels, &batch);
            let mask = (spec.dropout_rate > 0.0).then(|| DropoutMask::sample(spec, x.nrows(), &mut dropout));
            let (loss, grad) = loss_and_grad_masked(spec, &params, x.view(), &y, mask.as_ref())?;
            total += loss * batch.len() as f64;
            state.step(&mut params.0, &grad.0);
        }
        trace.push(total / inputs.nrows() as f64);
    }
    Ok((params, trace))
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: ArrayView2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row.view()) == label)
        .count();
    hits as f64 / labels.len() as f64
}

/// Column means of a batch.
pub fn column_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Row slice helper for callers holding owned tensors.
pub fn rows(x: &Tensor, start: usize, end: usize) -> ArrayView2<'_, f64> {
    x.slice(s![start..end, ..])
}
