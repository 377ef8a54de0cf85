//! Thompson sampling for linear bandits: exact posterior sampling over finite
//! and Gaussian beliefs, and the ensemble-sampling approximation built from
//! perturbed, anchored least-squares models.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum BanditError {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("observation is impossible under every hypothesis")]
    ImpossibleObservation,
}

/// Linear-Gaussian bandit: pulling arm `x` yields `theta*^T x + w`, `w ~ N(0, noise_std^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBanditEnv {
    theta: Array1<f64>,
    arms: Array2<f64>,
    noise_std: f64,
}

impl LinearBanditEnv {
    pub fn new(theta: Array1<f64>, arms: Array2<f64>, noise_std: f64) -> Result<Self, BanditError> {
        if arms.nrows() < 2 {
            return Err(BanditError::InvalidEnv("need at least two arms".into()));
        }
        if arms.ncols() != theta.len() {
            return Err(BanditError::InvalidEnv("arm and parameter dimensions differ".into()));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(BanditError::InvalidEnv("noise std must be positive".into()));
        }
        Ok(Self { theta, arms, noise_std })
    }

    /// Arms and parameter drawn from N(0, I).
    pub fn random(num_arms: usize, dim: usize, noise_std: f64, seed: u64) -> Result<Self, BanditError> {
        let mut rng = rng::seeded(seed);
        let theta = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
        let arms = Array2::from_shape_simple_fn((num_arms, dim), || StandardNormal.sample(&mut rng));
        Self::new(theta, arms, noise_std)
    }

    /// The fixed 10-arm, 5-dimensional, noise 0.5 benchmark.
    pub fn benchmark() -> Self {
        Self::random(10, 5, 0.5, 20_220_705).expect("valid benchmark")
    }

    pub fn theta(&self) -> ArrayView1<'_, f64> {
        self.theta.view()
    }

    pub fn arms(&self) -> &Array2<f64> {
        &self.arms
    }

    pub fn arm(&self, i: usize) -> ArrayView1<'_, f64> {
        self.arms.row(i)
    }

    pub fn num_arms(&self) -> usize {
        self.arms.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn mean_rewards(&self) -> Array1<f64> {
        self.arms.dot(&self.theta)
    }

    pub fn best_arm(&self) -> usize {
        greedy_arm(&self.arms, self.theta.view())
    }

    pub fn observe(&self, arm: usize, rng: &mut Rng) -> f64 {
        let noise: f64 = StandardNormal.sample(rng);
        self.arms.row(arm).dot(&self.theta) + self.noise_std * noise
    }
}

/// Expected reward over a finite outcome set: `sum_o q(o) r(o)`.
pub fn expected_reward(outcome_probs: &[f64], outcomes: &[f64], reward: impl Fn(f64) -> f64) -> f64 {
    outcome_probs.iter().zip(outcomes).map(|(&q, &o)| q * reward(o)).sum()
}

/// Expected identity reward under the linear-Gaussian model.
pub fn linear_expected_reward(theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    theta.dot(&x)
}

/// Arm with the largest expected reward under `theta`; ties go to the lowest index.
pub fn greedy_arm(arms: &Array2<f64>, theta: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, x) in arms.rows().into_iter().enumerate() {
        let v = linear_expected_reward(theta, x);
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

fn gaussian_log_likelihood(mean: f64, y: f64, noise_std: f64) -> f64 {
    let z = (y - mean) / noise_std;
    -0.5 * z * z
}

/// Belief over a finite set of parameter hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePosterior {
    hypotheses: Vec<Array1<f64>>,
    masses: Vec<f64>,
}

impl FinitePosterior {
    pub fn new(hypotheses: Vec<Array1<f64>>, masses: Vec<f64>) -> Result<Self, BanditError> {
        if hypotheses.is_empty() || hypotheses.len() != masses.len() {
            return Err(BanditError::InvalidPosterior("one mass per hypothesis required".into()));
        }
        if masses.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(BanditError::InvalidPosterior("masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BanditError::InvalidPosterior(format!("masses sum to {total}")));
        }
        Ok(Self { hypotheses, masses })
    }

    pub fn uniform(hypotheses: Vec<Array1<f64>>) -> Result<Self, BanditError> {
        let n = hypotheses.len().max(1);
        Self::new(hypotheses, vec![1.0 / n as f64; n])
    }

    pub fn hypotheses(&self) -> &[Array1<f64>] {
        &self.hypotheses
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.masses.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.masses.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Bayes update under a linear-Gaussian likelihood, computed in log space.
    pub fn update_gaussian(&self, x: ArrayView1<f64>, y: f64, noise_std: f64) -> Result<Self, BanditError> {
        let logs: Vec<f64> = self
            .hypotheses
            .iter()
            .zip(&self.masses)
            .map(|(h, &p)| {
                if p > 0.0 {
                    p.ln() + gaussian_log_likelihood(h.dot(&x), y, noise_std)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(BanditError::ImpossibleObservation);
        }
        let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        Ok(self.with_masses(normalize(weights)?))
    }

    fn with_masses(&self, masses: Vec<f64>) -> Self {
        Self {
            hypotheses: self.hypotheses.clone(),
            masses,
        }
    }
}

fn normalize(weights: Vec<f64>) -> Result<Vec<f64>, BanditError> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(BanditError::ImpossibleObservation);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Bayes rule over a finite hypothesis set given each hypothesis' likelihood
/// `q_u(y | x)` of the observation.
pub fn finite_posterior_update(post: &FinitePosterior, likelihoods: &[f64]) -> Result<FinitePosterior, BanditError> {
    if likelihoods.len() != post.masses.len() {
        return Err(BanditError::InvalidPosterior("one likelihood per hypothesis required".into()));
    }
    if likelihoods.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
        return Err(BanditError::InvalidPosterior("likelihoods must be nonnegative".into()));
    }
    let weights = post.masses.iter().zip(likelihoods).map(|(p, q)| p * q).collect();
    Ok(post.with_masses(normalize(weights)?))
}

/// Gaussian belief `N(mean, cov)` over the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: Array1<f64>,
    cov: Array2<f64>,
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn symmetrize(m: &mut Array2<f64>) {
    let t = m.t().to_owned();
    *m += &t;
    *m *= 0.5;
}

impl GaussianPosterior {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self, BanditError> {
        if cov.dim() != (mean.len(), mean.len()) {
            return Err(BanditError::InvalidPosterior("covariance shape mismatch".into()));
        }
        let asym = (&cov - &cov.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(asym <= 1e-10) {
            return Err(BanditError::InvalidPosterior("covariance is not symmetric".into()));
        }
        if to_na(&cov).cholesky().is_none() {
            return Err(BanditError::NotPositiveDefinite);
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(Array1::zeros(dim), Array2::eye(dim)).expect("identity is positive definite")
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.cov.diag().sum()
    }

    pub fn precision(&self) -> Result<Array2<f64>, BanditError> {
        let inv = to_na(&self.cov).cholesky().ok_or(BanditError::NotPositiveDefinite)?.inverse();
        let mut p = Array2::from_shape_fn(self.cov.dim(), |(i, j)| inv[(i, j)]);
        symmetrize(&mut p);
        Ok(p)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Array1<f64>, BanditError> {
        let chol = to_na(&self.cov).cholesky().ok_or(BanditError::NotPositiveDefinite)?;
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let lz = chol.l() * z;
        Ok(Array1::from_shape_fn(self.dim(), |i| self.mean[i] + lz[i]))
    }
}

/// Conjugate update after observing `y` at `x`, as a rank-one information update.
pub fn gaussian_posterior_update(
    post: &GaussianPosterior,
    x: ArrayView1<f64>,
    y: f64,
    noise_std: f64,
) -> Result<GaussianPosterior, BanditError> {
    let sx = post.cov.dot(&x);
    let denom = noise_std * noise_std + x.dot(&sx);
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(BanditError::NotPositiveDefinite);
    }
    let outer = Array2::from_shape_fn(post.cov.dim(), |(i, j)| sx[i] * sx[j] / denom);
    let mut cov = &post.cov - &outer;
    symmetrize(&mut cov);
    if cov.diag().iter().any(|&v| !(v > 0.0)) {
        return Err(BanditError::NotPositiveDefinite);
    }
    let mean = &post.mean + &(&sx * ((y - x.dot(&post.mean)) / denom));
    Ok(GaussianPosterior { mean, cov })
}

/// Anything that can act in a linear bandit and learn from the outcome.
pub trait BanditAgent {
    fn choose(&mut self, env: &LinearBanditEnv, rng: &mut Rng) -> usize;
    fn observe(&mut self, x: ArrayView1<f64>, y: f64, rng: &mut Rng) -> Result<(), BanditError>;
}

/// Exact Thompson sampling over a Gaussian belief.
#[derive(Debug, Clone)]
pub struct ThompsonAgent {
    pub posterior: GaussianPosterior,
    pub noise_std: f64,
}

impl BanditAgent for ThompsonAgent {
    fn choose(&mut self, env: &LinearBanditEnv, rng: &mut Rng) -> usize {
        let theta = self.posterior.sample(rng).expect("posterior stays positive definite");
        greedy_arm(env.arms(), theta.view())
    }

    fn observe(&mut self, x: ArrayView1<f64>, y: f64, _rng: &mut Rng) -> Result<(), BanditError> {
        self.posterior = gaussian_posterior_update(&self.posterior, x, y, self.noise_std)?;
        Ok(())
    }
}

/// Exact Thompson sampling over a finite hypothesis set.
#[derive(Debug, Clone)]
pub struct FiniteThompsonAgent {
    pub posterior: FinitePosterior,
    pub noise_std: f64,
}

impl BanditAgent for FiniteThompsonAgent {
    fn choose(&mut self, env: &LinearBanditEnv, rng: &mut Rng) -> usize {
        let u = self.posterior.sample_index(rng);
        greedy_arm(env.arms(), self.posterior.hypotheses[u].view())
    }

    fn observe(&mut self, x: ArrayView1<f64>, y: f64, _rng: &mut Rng) -> Result<(), BanditError> {
        self.posterior = self.posterior.update_gaussian(x, y, self.noise_std)?;
        Ok(())
    }
}

/// One step of exact Thompson sampling: sample, act greedily, observe, update.
pub fn thompson_step(
    post: &GaussianPosterior,
    env: &LinearBanditEnv,
    rng: &mut Rng,
) -> Result<(usize, f64, GaussianPosterior), BanditError> {
    let theta = post.sample(rng)?;
    let arm = greedy_arm(env.arms(), theta.view());
    let y = env.observe(arm, rng);
    let next = gaussian_posterior_update(post, env.arm(arm), y, env.noise_std())?;
    Ok((arm, y, next))
}

/// `M` linear models sharing a Gaussian prior. Model `i` solves
/// `min ||theta - anchor_i||^2_{w P0} + sum_t (y_t + z_it - theta^T x_t)^2 / s^2`
/// where `z_it ~ N(0, perturbation_std^2)` is drawn fresh per model and step.
#[derive(Debug, Clone)]
pub struct EnsembleBanditAgent {
    anchors: Vec<Array1<f64>>,
    prior_precision: Array2<f64>,
    prior_weight: f64,
    noise_std: f64,
    perturbation_std: f64,
    information: Array2<f64>,
    targets: Vec<Array1<f64>>,
    solutions: Vec<Array1<f64>>,
}

impl EnsembleBanditAgent {
    /// Anchors drawn from the prior; observation perturbations match the noise.
    pub fn new(prior: &GaussianPosterior, m: usize, noise_std: f64, rng: &mut Rng) -> Result<Self, BanditError> {
        let anchors = (0..m).map(|_| prior.sample(rng)).collect::<Result<Vec<_>, _>>()?;
        Self::with_anchors(prior, anchors, noise_std, noise_std, 1.0)
    }

    pub fn with_anchors(
        prior: &GaussianPosterior,
        anchors: Vec<Array1<f64>>,
        noise_std: f64,
        perturbation_std: f64,
        prior_weight: f64,
    ) -> Result<Self, BanditError> {
        if anchors.is_empty() {
            return Err(BanditError::InvalidPosterior("ensemble needs at least one model".into()));
        }
        if !(noise_std > 0.0) || !(perturbation_std >= 0.0) || !(prior_weight >= 0.0) {
            return Err(BanditError::InvalidPosterior("invalid ensemble scales".into()));
        }
        let prior_precision = prior.precision()?;
        let information = &prior_precision * prior_weight;
        let targets: Vec<Array1<f64>> = anchors.iter().map(|a| information.dot(a)).collect();
        let mut agent = Self {
            solutions: anchors.clone(),
            anchors,
            prior_precision,
            prior_weight,
            noise_std,
            perturbation_std,
            information,
            targets,
        };
        if prior_weight > 0.0 {
            agent.solve();
        }
        Ok(agent)
    }

    pub fn size(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[Array1<f64>] {
        &self.anchors
    }

    pub fn solutions(&self) -> &[Array1<f64>] {
        &self.solutions
    }

    pub fn prior_precision(&self) -> &Array2<f64> {
        &self.prior_precision
    }

    pub fn prior_weight(&self) -> f64 {
        self.prior_weight
    }

    fn solve(&mut self) {
        let a = to_na(&self.information);
        let chol = a.clone().cholesky();
        let svd = if chol.is_none() { Some(a.svd(true, true)) } else { None };
        for (sol, b) in self.solutions.iter_mut().zip(&self.targets) {
            let rhs = DVector::from_iterator(b.len(), b.iter().copied());
            let x = match (&chol, &svd) {
                (Some(c), _) => c.solve(&rhs),
                (None, Some(s)) => s.solve(&rhs, 1e-12).expect("svd has both factors"),
                (None, None) => unreachable!(),
            };
            *sol = Array1::from_iter(x.iter().copied());
        }
    }

    fn update(&mut self, x: ArrayView1<f64>, y: f64, rng: &mut Rng) {
        let s2 = self.noise_std * self.noise_std;
        let d = x.len();
        for i in 0..d {
            for j in 0..d {
                self.information[[i, j]] += x[i] * x[j] / s2;
            }
        }
        let perturb = Normal::new(0.0, self.perturbation_std).expect("validated std");
        for b in &mut self.targets {
            let z = if self.perturbation_std > 0.0 { perturb.sample(rng) } else { 0.0 };
            b.scaled_add((y + z) / s2, &x);
        }
        self.solve();
    }
}

impl BanditAgent for EnsembleBanditAgent {
    fn choose(&mut self, env: &LinearBanditEnv, rng: &mut Rng) -> usize {
        let i = rng.random_range(0..self.size());
        greedy_arm(env.arms(), self.solutions[i].view())
    }

    fn observe(&mut self, x: ArrayView1<f64>, y: f64, rng: &mut Rng) -> Result<(), BanditError> {
        self.update(x, y, rng);
        Ok(())
    }
}

/// One ensemble-sampling step: pick a model uniformly, act greedily under it,
/// observe and update every model with its own perturbation.
pub fn ensemble_sampling_step(
    mut agent: EnsembleBanditAgent,
    env: &LinearBanditEnv,
    rng: &mut Rng,
) -> (usize, f64, EnsembleBanditAgent) {
    let arm = agent.choose(env, rng);
    let y = env.observe(arm, rng);
    agent.update(env.arm(arm), y, rng);
    (arm, y, agent)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub arms: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Run `steps` rounds. Environment noise and agent randomness use separate
/// streams of `seed`, so different agents face the same noise sequence.
pub fn run_episode(
    agent: &mut dyn BanditAgent,
    env: &LinearBanditEnv,
    steps: usize,
    seed: u64,
) -> Result<History, BanditError> {
    let mut env_rng = rng::seeded(rng::derive_seed(seed, &[0]));
    let mut agent_rng = rng::seeded(rng::derive_seed(seed, &[1]));
    let mut history = History::default();
    for _ in 0..steps {
        let arm = agent.choose(env, &mut agent_rng);
        let y = env.observe(arm, &mut env_rng);
        agent.observe(env.arm(arm), y, &mut agent_rng)?;
        history.arms.push(arm);
        history.rewards.push(y);
    }
    Ok(history)
}

/// `regret_t = sum_{s <= t} (max_x theta*^T x - theta*^T x_s)`.
pub fn cumulative_regret(history: &History, env: &LinearBanditEnv) -> Vec<f64> {
    let means = env.mean_rewards();
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    history
        .arms
        .iter()
        .scan(0.0, |acc, &a| {
            *acc += best - means[a];
            Some(*acc)
        })
        .collect()
}

/// Mean per-step regret over the 1-based inclusive step range `[from, to]`.
pub fn mean_step_regret(regret: &[f64], from: usize, to: usize) -> f64 {
    let before = if from > 1 { regret[from - 2] } else { 0.0 };
    (regret[to - 1] - before) / (to + 1 - from) as f64
}

/// Cumulative regret curves of exact TS and an `m`-model ensemble on one seed.
pub fn compare_policies(env: &LinearBanditEnv, m: usize, steps: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>), BanditError> {
    let prior = GaussianPosterior::standard(env.dim());
    let mut exact = ThompsonAgent {
        posterior: prior.clone(),
        noise_std: env.noise_std(),
    };
    let ts = run_episode(&mut exact, env, steps, seed)?;
    let mut anchor_rng = rng::seeded(rng::derive_seed(seed, &[2]));
    let mut ens = EnsembleBanditAgent::new(&prior, m, env.noise_std(), &mut anchor_rng)?;
    let es = run_episode(&mut ens, env, steps, seed)?;
    Ok((cumulative_regret(&ts, env), cumulative_regret(&es, env)))
}
