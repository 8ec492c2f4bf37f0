//! Explicit policies, frozen reference snapshots, synthetic reward models and
//! the log-ratio `h(x, c) = log pi(x|c) - log pi_ref(x|c)` that every
//! preference loss is built on.
//!
//! Two policy families are supported:
//!
//! * [`CategoricalPolicy`]: a softmax over a finite [`Vocabulary`] per
//!   condition. Every item carries a fixed embedding so that cosine
//!   similarity between motions is defined.
//! * [`GaussianPolicy`]: a diagonal Gaussian per condition, parameterised by
//!   its mean and the log of its per-axis scale.
//!
//! Both expose exact log-densities, analytic score functions and seeded
//! sampling. The diffusion policy lives in [`crate::diffusion`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Norm below which a vector is treated as zero by [`cosine_similarity`].
pub const ZERO_NORM: f64 = 1e-12;

/// Index of a condition in the experiment's finite condition set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition(pub usize);

impl Condition {
    pub fn id(self) -> usize {
        self.0
    }

    pub(crate) fn check(self, count: usize) -> Result<()> {
        if self.0 < count {
            Ok(())
        } else {
            Err(Error::ConditionOutOfRange { id: self.0, count })
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// A motion: a finite real vector, optionally tagged with the vocabulary item
/// it was drawn from (categorical mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    coords: Vec<f64>,
    item: Option<usize>,
}

impl Motion {
    /// A free-standing point motion.
    pub fn point(coords: Vec<f64>) -> Result<Self> {
        if let Some(bad) = coords.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("motion coordinate {bad}")));
        }
        Ok(Self { coords, item: None })
    }

    /// A vocabulary item together with its embedding.
    pub fn item(index: usize, embedding: Vec<f64>) -> Result<Self> {
        let mut m = Self::point(embedding)?;
        m.item = Some(index);
        Ok(m)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn item_index(&self) -> Option<usize> {
        self.item
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Fixed embeddings for the items of a categorical policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    embeddings: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn from_embeddings(embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InvalidParameter("vocabulary must not be empty".into()));
        }
        let dim = embeddings[0].len();
        for e in &embeddings {
            if e.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: e.len() });
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("vocabulary embedding".into()));
            }
        }
        Ok(Self { embeddings })
    }

    /// Standard-normal embeddings drawn from `seed`.
    pub fn random(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidParameter("vocabulary size and dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..size)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok(Self { embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.embeddings[index]
    }

    /// The motion for vocabulary item `index`.
    pub fn motion(&self, index: usize) -> Motion {
        Motion { coords: self.embeddings[index].clone(), item: Some(index) }
    }

    pub fn motions(&self) -> Vec<Motion> {
        (0..self.len()).map(|i| self.motion(i)).collect()
    }
}

/// Softmax policy over a finite vocabulary, one logit row per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    vocab: Arc<Vocabulary>,
    n_conditions: usize,
    logits: Vec<f64>,
}

impl CategoricalPolicy {
    /// `logits` is condition-major: `logits[c * vocab_size + item]`.
    pub fn new(vocab: Arc<Vocabulary>, n_conditions: usize, logits: Vec<f64>) -> Result<Self> {
        if n_conditions == 0 {
            return Err(Error::InvalidParameter("need at least one condition".into()));
        }
        let expected = n_conditions * vocab.len();
        if logits.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: logits.len() });
        }
        Ok(Self { vocab, n_conditions, logits })
    }

    pub fn uniform(vocab: Arc<Vocabulary>, n_conditions: usize) -> Result<Self> {
        let n = n_conditions * vocab.len();
        Self::new(vocab, n_conditions, vec![0.0; n])
    }

    /// Policy whose per-condition probabilities are exactly `probs` (rows
    /// must be non-negative and sum to one). Zero entries become `-inf` logits.
    pub fn from_probabilities(vocab: Arc<Vocabulary>, probs: &[Vec<f64>]) -> Result<Self> {
        let mut logits = Vec::with_capacity(probs.len() * vocab.len());
        for row in probs {
            if row.len() != vocab.len() {
                return Err(Error::DimensionMismatch { expected: vocab.len(), got: row.len() });
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("probability rows must be non-negative and sum to 1".into()));
            }
            logits.extend(row.iter().map(|p| p.ln()));
        }
        Self::new(vocab, probs.len(), logits)
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn logits(&self, c: Condition) -> &[f64] {
        let v = self.vocab.len();
        &self.logits[c.0 * v..(c.0 + 1) * v]
    }

    /// Log-probabilities of every item under condition `c`.
    pub fn log_probs(&self, c: Condition) -> Result<Vec<f64>> {
        c.check(self.n_conditions)?;
        let row = self.logits(c);
        let norm = log_sum_exp(row);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("log-normaliser for {c}")));
        }
        Ok(row.iter().map(|l| l - norm).collect())
    }

    pub fn probs(&self, c: Condition) -> Result<Vec<f64>> {
        Ok(self.log_probs(c)?.into_iter().map(f64::exp).collect())
    }

    fn item_of(&self, x: &Motion) -> Result<usize> {
        let item = x
            .item_index()
            .ok_or_else(|| Error::OutOfSupport("categorical policy needs an item motion".into()))?;
        if item >= self.vocab.len() {
            return Err(Error::OutOfSupport(format!("item {item} outside vocabulary of {}", self.vocab.len())));
        }
        Ok(item)
    }
}

/// Diagonal Gaussian per condition. Parameters per condition are the mean
/// followed by the log of each axis' standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    dim: usize,
    n_conditions: usize,
    params: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(dim: usize, n_conditions: usize, params: Vec<f64>) -> Result<Self> {
        if dim == 0 || n_conditions == 0 {
            return Err(Error::InvalidParameter("dimension and condition count must be positive".into()));
        }
        let expected = 2 * dim * n_conditions;
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Self { dim, n_conditions, params })
    }

    /// Single-condition Gaussian with the given mean and per-axis variances.
    pub fn from_mean_variance(mean: &[f64], variance: &[f64]) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: variance.len() });
        }
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("variances must be positive".into()));
        }
        let mut params = mean.to_vec();
        params.extend(variance.iter().map(|v| 0.5 * v.ln()));
        Self::new(mean.len(), 1, params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, c: Condition) -> &[f64] {
        let base = 2 * self.dim * c.0;
        &self.params[base..base + self.dim]
    }

    pub fn log_scale(&self, c: Condition) -> &[f64] {
        let base = 2 * self.dim * c.0 + self.dim;
        &self.params[base..base + self.dim]
    }

    fn scales(&self, c: Condition) -> Result<Vec<f64>> {
        self.log_scale(c)
            .iter()
            .map(|ls| {
                let s = ls.exp();
                if s.is_finite() && s > 0.0 {
                    Ok(s)
                } else {
                    Err(Error::InvalidParameter(format!("gaussian scale {s} is not strictly positive")))
                }
            })
            .collect()
    }
}

/// Which family a policy belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Categorical,
    Gaussian,
}

/// An explicit conditional distribution over motions.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Categorical(CategoricalPolicy),
    Gaussian(GaussianPolicy),
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Categorical(_) => PolicyKind::Categorical,
            Policy::Gaussian(_) => PolicyKind::Gaussian,
        }
    }

    pub fn n_conditions(&self) -> usize {
        match self {
            Policy::Categorical(p) => p.n_conditions,
            Policy::Gaussian(p) => p.n_conditions,
        }
    }

    /// Dimension of the motions this policy produces.
    pub fn motion_dim(&self) -> usize {
        match self {
            Policy::Categorical(p) => p.vocab.dim(),
            Policy::Gaussian(p) => p.dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Policy::Categorical(p) => &p.logits,
            Policy::Gaussian(p) => &p.params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Policy::Categorical(p) => &mut p.logits,
            Policy::Gaussian(p) => &mut p.params,
        }
    }

    /// Copy of this policy with the parameter vector replaced.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: params.len() });
        }
        let mut out = self.clone();
        out.params_mut().copy_from_slice(params);
        Ok(out)
    }

    pub fn as_categorical(&self) -> Option<&CategoricalPolicy> {
        match self {
            Policy::Categorical(p) => Some(p),
            Policy::Gaussian(_) => None,
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianPolicy> {
        match self {
            Policy::Gaussian(p) => Some(p),
            Policy::Categorical(_) => None,
        }
    }

    /// Exact `log pi(x | c)`.
    pub fn log_prob(&self, x: &Motion, c: Condition) -> Result<f64> {
        c.check(self.n_conditions())?;
        match self {
            Policy::Categorical(p) => {
                let item = p.item_of(x)?;
                Ok(p.log_probs(c)?[item])
            }
            Policy::Gaussian(p) => {
                if x.dim() != p.dim {
                    return Err(Error::DimensionMismatch { expected: p.dim, got: x.dim() });
                }
                let scales = p.scales(c)?;
                let mean = p.mean(c);
                let ln_2pi = (2.0 * std::f64::consts::PI).ln();
                Ok(x.coords()
                    .iter()
                    .zip(mean)
                    .zip(&scales)
                    .map(|((xi, mi), si)| {
                        let z = (xi - mi) / si;
                        -0.5 * z * z - si.ln() - 0.5 * ln_2pi
                    })
                    .sum())
            }
        }
    }

    /// Gradient of `log pi(x | c)` with respect to [`Policy::params`].
    pub fn grad_log_prob(&self, x: &Motion, c: Condition) -> Result<Vec<f64>> {
        c.check(self.n_conditions())?;
        let mut grad = vec![0.0; self.n_params()];
        match self {
            Policy::Categorical(p) => {
                let item = p.item_of(x)?;
                let v = p.vocab_size();
                let probs = p.probs(c)?;
                let block = &mut grad[c.0 * v..(c.0 + 1) * v];
                for (j, (g, pj)) in block.iter_mut().zip(&probs).enumerate() {
                    *g = if j == item { 1.0 } else { 0.0 } - pj;
                }
            }
            Policy::Gaussian(p) => {
                if x.dim() != p.dim {
                    return Err(Error::DimensionMismatch { expected: p.dim, got: x.dim() });
                }
                let scales = p.scales(c)?;
                let mean = p.mean(c);
                let base = 2 * p.dim * c.0;
                for d in 0..p.dim {
                    let z = (x.coords()[d] - mean[d]) / scales[d];
                    grad[base + d] = z / scales[d];
                    grad[base + p.dim + d] = z * z - 1.0;
                }
            }
        }
        Ok(grad)
    }

    /// `n` i.i.d. draws for condition `c`, reproducible from `seed`.
    pub fn sample(&self, c: Condition, n: usize, seed: u64) -> Result<Vec<Motion>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(c, n, &mut rng)
    }

    /// Draws from a caller-owned generator.
    pub fn sample_with<R: Rng + ?Sized>(&self, c: Condition, n: usize, rng: &mut R) -> Result<Vec<Motion>> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        c.check(self.n_conditions())?;
        match self {
            Policy::Categorical(p) => {
                let probs = p.probs(c)?;
                let cdf: Vec<f64> = probs
                    .iter()
                    .scan(0.0, |acc, q| {
                        *acc += q;
                        Some(*acc)
                    })
                    .collect();
                let total = *cdf.last().expect("non-empty vocabulary");
                Ok((0..n)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() * total;
                        // first bucket whose cumulative mass exceeds u, skipping zero-mass items
                        let idx = cdf
                            .iter()
                            .zip(&probs)
                            .position(|(c, q)| u < *c && *q > 0.0)
                            .unwrap_or_else(|| probs.iter().rposition(|q| *q > 0.0).unwrap_or(0));
                        p.vocab.motion(idx)
                    })
                    .collect())
            }
            Policy::Gaussian(p) => {
                let scales = p.scales(c)?;
                let mean = p.mean(c).to_vec();
                Ok((0..n)
                    .map(|_| {
                        let coords = mean
                            .iter()
                            .zip(&scales)
                            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        Motion { coords, item: None }
                    })
                    .collect())
            }
        }
    }
}

/// Frozen copy of a policy, used as `pi_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSnapshot(Policy);

impl ReferenceSnapshot {
    pub fn freeze(policy: &Policy) -> Self {
        Self(policy.clone())
    }

    pub fn policy(&self) -> &Policy {
        &self.0
    }

    pub fn log_prob(&self, x: &Motion, c: Condition) -> Result<f64> {
        self.0.log_prob(x, c)
    }
}

fn check_compatible(policy: &Policy, reference: &ReferenceSnapshot) -> Result<()> {
    let r = reference.policy();
    if policy.kind() != r.kind() {
        return Err(Error::KindMismatch(format!("{:?} policy vs {:?} reference", policy.kind(), r.kind())));
    }
    if policy.n_params() != r.n_params() || policy.motion_dim() != r.motion_dim() {
        return Err(Error::KindMismatch("policy and reference differ in shape".into()));
    }
    Ok(())
}

/// `h(x, c) = log pi(x|c) - log pi_ref(x|c)`.
pub fn log_ratio(policy: &Policy, reference: &ReferenceSnapshot, x: &Motion, c: Condition) -> Result<f64> {
    check_compatible(policy, reference)?;
    Ok(policy.log_prob(x, c)? - reference.log_prob(x, c)?)
}

/// Gradient of `h(x, c)` with respect to the policy parameters (the
/// reference contributes nothing).
pub fn grad_log_ratio(policy: &Policy, reference: &ReferenceSnapshot, x: &Motion, c: Condition) -> Result<Vec<f64>> {
    check_compatible(policy, reference)?;
    policy.grad_log_prob(x, c)
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine_similarity(a: &Motion, b: &Motion) -> Result<f64> {
    cosine_of(a.coords(), b.coords())
}

pub(crate) fn cosine_of(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One Gaussian component of a mixture reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_weight_norm: f64,
}

impl PreparedComponent {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        self.log_weight_norm - 0.5 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }
}

/// Gaussian-mixture density reward normalised by its global maximum, so the
/// score lives in `[0, 1]` and a fixed threshold keeps its meaning.
#[derive(Debug, Clone)]
pub struct MixtureReward {
    components: Vec<MixtureComponent>,
    prepared: Vec<PreparedComponent>,
    mode: Vec<f64>,
    log_peak: f64,
}

/// Convergence tolerance of the mode search.
pub const MODE_TOLERANCE: f64 = 1e-10;

pub(crate) fn cholesky_checked(cov: &[Vec<f64>], dim: usize) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: cov.len() });
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| cov[i][j]);
    for i in 0..dim {
        for j in 0..dim {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 || !m[(i, j)].is_finite() {
                return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
            }
        }
    }
    m.cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("covariance {cov:?} has no Cholesky factor")))
}

impl MixtureReward {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("mixture weights must be positive and sum to 1".into()));
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut prepared = Vec::with_capacity(components.len());
        for comp in &components {
            if comp.mean.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: comp.mean.len() });
            }
            let chol = cholesky_checked(&comp.covariance, dim)?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            prepared.push(PreparedComponent {
                mean: DVector::from_column_slice(&comp.mean),
                precision: chol.inverse(),
                log_weight_norm: comp.weight.ln() - 0.5 * (dim as f64 * ln_2pi + log_det),
            });
        }
        let mut reward = Self { components, prepared, mode: vec![0.0; dim], log_peak: f64::NEG_INFINITY };
        reward.locate_mode()?;
        Ok(reward)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    /// Location of the global density maximum found at construction.
    pub fn mode(&self) -> &[f64] {
        &self.mode
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let terms: Vec<f64> = self.prepared.iter().map(|c| c.log_density(&x)).collect();
        log_sum_exp(&terms)
    }

    /// Normalised score `p(x) / p(mode)`, clamped to `[0, 1]`.
    pub fn score(&self, x: &[f64]) -> f64 {
        (self.log_density(x) - self.log_peak).exp().clamp(0.0, 1.0)
    }

    // Multi-start fixed-point ascent from every component mean:
    // x <- (sum_k r_k P_k)^-1 sum_k r_k P_k mu_k, with r_k the responsibilities.
    fn locate_mode(&mut self) -> Result<()> {
        let dim = self.dim();
        for start in self.prepared.iter().map(|c| c.mean.clone()).collect::<Vec<_>>() {
            let mut x = start;
            for _ in 0..100_000 {
                let logs: Vec<f64> = self.prepared.iter().map(|c| c.log_density(&x)).collect();
                let norm = log_sum_exp(&logs);
                let mut lhs = DMatrix::zeros(dim, dim);
                let mut rhs = DVector::zeros(dim);
                for (c, l) in self.prepared.iter().zip(&logs) {
                    let r = (l - norm).exp();
                    lhs += &c.precision * r;
                    rhs += &c.precision * &c.mean * r;
                }
                let next = lhs
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::NotPositiveDefinite("mode-search system is singular".into()))?;
                let step = (&next - &x).norm();
                x = next;
                if step < MODE_TOLERANCE {
                    break;
                }
            }
            let value = {
                let logs: Vec<f64> = self.prepared.iter().map(|c| c.log_density(&x)).collect();
                log_sum_exp(&logs)
            };
            if value > self.log_peak {
                self.log_peak = value;
                self.mode = x.iter().copied().collect();
            }
        }
        Ok(())
    }
}

/// Reward model mapping `(motion, condition)` to a score in `[0, 1]`.
#[derive(Debug, Clone)]
pub enum RewardModel {
    GaussianMixture(MixtureReward),
    /// `scores[condition][item]`.
    Table(Vec<Vec<f64>>),
    /// Cosine similarity to a per-condition embedding, mapped to `[0, 1]`.
    Cosine(Vec<Vec<f64>>),
}

impl RewardModel {
    pub fn table(scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidParameter("table rewards must lie in [0, 1]".into()));
        }
        Ok(RewardModel::Table(scores))
    }

    pub fn reward(&self, x: &Motion, c: Condition) -> Result<f64> {
        match self {
            RewardModel::GaussianMixture(m) => {
                if x.dim() != m.dim() {
                    return Err(Error::DimensionMismatch { expected: m.dim(), got: x.dim() });
                }
                Ok(m.score(x.coords()))
            }
            RewardModel::Table(scores) => {
                c.check(scores.len())?;
                let item = x
                    .item_index()
                    .ok_or_else(|| Error::OutOfSupport("table reward needs an item motion".into()))?;
                scores[c.0]
                    .get(item)
                    .copied()
                    .ok_or_else(|| Error::OutOfSupport(format!("no table entry for item {item}")))
            }
            RewardModel::Cosine(targets) => {
                c.check(targets.len())?;
                Ok(0.5 * (1.0 + cosine_of(x.coords(), &targets[c.0])?))
            }
        }
    }
}
