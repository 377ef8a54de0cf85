//! Acquisition functions and batch selectors.
//!
//! Scores are "higher is more desirable to label". Entropies are in nats.
//! All tie-breaks go to the lowest index so results are reproducible across
//! implementations.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{ensemble_mean, PredictiveDistribution};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AcquisitionError {
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("requested {requested} samples from a pool of {pool}")]
    BatchLargerThanPool { requested: usize, pool: usize },
    #[error("k-center selection needs a nonempty initial set")]
    EmptyInitialSet,
    #[error("initial index {0} outside the feature set")]
    IndexOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Entropy,
    Bald,
    Vr,
    Coreset,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Entropy,
        Strategy::Bald,
        Strategy::Vr,
        Strategy::Coreset,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::Bald => "bald",
            Strategy::Vr => "vr",
            Strategy::Coreset => "coreset",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown strategy `{s}`, expected one of: entropy, bald, vr, coreset, random"
                )
            })
    }
}

/// Chosen indices in selection order, with the score each had when chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Predictive entropy of each row of ensemble-mean probabilities.
pub fn entropy_scores(mean_probs: ArrayView2<f64>) -> Vec<f64> {
    mean_probs.rows().into_iter().map(entropy).collect()
}

/// Mutual information between label and member: entropy of the mean minus
/// the mean member entropy.
pub fn bald_scores(dist: &PredictiveDistribution) -> Vec<f64> {
    let mean = ensemble_mean(dist);
    let m = dist.num_members() as f64;
    (0..dist.num_samples())
        .map(|i| {
            let expected: f64 = dist.sample(i).rows().into_iter().map(entropy).sum::<f64>() / m;
            (entropy(mean.row(i)) - expected).max(0.0)
        })
        .collect()
}

fn first_argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Variation ratio `1 - f_m / M` of the member argmax votes.
pub fn vr_scores(dist: &PredictiveDistribution) -> Vec<f64> {
    let m = dist.num_members();
    let mut votes = vec![0usize; dist.num_classes()];
    (0..dist.num_samples())
        .map(|i| {
            votes.iter_mut().for_each(|v| *v = 0);
            for row in dist.sample(i).rows() {
                votes[first_argmax(row)] += 1;
            }
            let modal = votes.iter().copied().max().unwrap_or(0);
            1.0 - modal as f64 / m as f64
        })
        .collect()
}

/// The `b` highest scores, descending, ties by ascending index.
pub fn select_batch(scores: &[f64], b: usize) -> Result<SelectionResult, AcquisitionError> {
    if b == 0 {
        return Err(AcquisitionError::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(b);
    Ok(SelectionResult {
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

/// Uniform sample without replacement. Scores are all zero.
pub fn random_select(pool_size: usize, b: usize, seed: u64) -> Result<SelectionResult, AcquisitionError> {
    if b > pool_size {
        return Err(AcquisitionError::BatchLargerThanPool {
            requested: b,
            pool: pool_size,
        });
    }
    let mut rng = rng::seeded(seed);
    let indices = index::sample(&mut rng, pool_size, b).into_vec();
    Ok(SelectionResult {
        scores: vec![0.0; indices.len()],
        indices,
    })
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center: repeatedly pick the point farthest (Euclidean) from its
/// nearest selected point. Scores are those distances.
pub fn kcenter_greedy(
    features: ArrayView2<f64>,
    initially_selected: &[usize],
    b: usize,
) -> Result<SelectionResult, AcquisitionError> {
    if initially_selected.is_empty() {
        return Err(AcquisitionError::EmptyInitialSet);
    }
    let n = features.nrows();
    if let Some(&bad) = initially_selected.iter().find(|&&i| i >= n) {
        return Err(AcquisitionError::IndexOutOfRange(bad));
    }
    let mut selected = vec![false; n];
    for &i in initially_selected {
        selected[i] = true;
    }
    let mut min_dist = vec![f64::INFINITY; n];
    for i in (0..n).filter(|&i| !selected[i]) {
        for &j in initially_selected {
            let d = squared_distance(features.row(i), features.row(j));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    let mut result = SelectionResult {
        indices: Vec::with_capacity(b),
        scores: Vec::with_capacity(b),
    };
    for _ in 0..b {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !selected[i]) {
            if best.is_none_or(|k| min_dist[i] > min_dist[k]) {
                best = Some(i);
            }
        }
        let Some(pick) = best else { break };
        selected[pick] = true;
        result.indices.push(pick);
        result.scores.push(min_dist[pick].sqrt());
        for i in (0..n).filter(|&i| !selected[i]) {
            let d = squared_distance(features.row(i), features.row(pick));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(result)
}
