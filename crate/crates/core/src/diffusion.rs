//! Toy diffusion policy and the diffusion form of the semi-online loss.
//!
//! The denoiser is a per-timestep affine noise predictor
//! `eps_hat(x, t) = A_t x + b_t`, which keeps every gradient closed-form.
//! Timesteps are indexed `0..T`; step `t` has signal coefficient
//! `alpha_t = sqrt(abar_t)` and noise coefficient `sigma_t = sqrt(1 - abar_t)`.
//!
//! The loss for one offline winner and a batch of online candidates is
//!
//! ```text
//! dL(x)  = |eps_theta(x_t, t) - eps|^2 - |eps_ref(x_t, t) - eps|^2
//! z      = -T w_t (beta_w dL(x_w) - beta dL(x_l))   if r(x_l) < tau
//!        = -T w_t  beta_w dL(x_w)                   otherwise
//! loss   = -log sigmoid(z)
//! ```
//!
//! with `beta_w = beta (C - S)` and `S` the minimum winner/candidate cosine.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::SyntheticSetup;
use crate::enumerate::Tuples;
use crate::error::{Error, Result};
use crate::losses::{min_similarity, win_weight, Branch, LossConfig, PreferenceRecord};
use crate::model::{cholesky_checked, Condition, Motion, RewardModel};
use crate::numeric::{sigmoid, softplus, CompensatedSum};
use crate::oracles::{self, finite_diff_grad, GradientReport};
use crate::sampler::{stream_seed, CandidateBatch, MotionSampler};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step noise increments.
pub const MAX_BETA: f64 = 0.999;

/// Per-step weighting of the diffusion loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaMode {
    /// `w_t = 1`.
    #[default]
    Const,
    /// `w_t = alpha_t^2 / sigma_t^2`.
    Snr,
}

impl FromStr for OmegaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const" => Ok(OmegaMode::Const),
            "snr" => Ok(OmegaMode::Snr),
            other => Err(Error::InvalidParameter(format!("omega must be `const` or `snr`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bars: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    betas: Vec<f64>,
    omega: Vec<f64>,
    mode: OmegaMode,
}

impl NoiseSchedule {
    /// Cosine schedule with `t_max` steps.
    pub fn cosine(t_max: usize, mode: OmegaMode) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let f = |u: usize| ((u as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2);
        let mut abar = 1.0;
        let mut alpha_bars = Vec::with_capacity(t_max);
        for u in 1..=t_max {
            let beta = (1.0 - f(u) / f(u - 1)).min(MAX_BETA);
            abar *= 1.0 - beta;
            alpha_bars.push(abar);
        }
        Self::from_alpha_bars(alpha_bars, mode)
    }

    /// Schedule from cumulative signal fractions `abar_t`, non-increasing in
    /// `[0, 1]`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>, mode: OmegaMode) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &a in &alpha_bars {
            if !(0.0..=prev).contains(&a) {
                return Err(Error::InvalidParameter(format!("alpha_bar must be non-increasing in [0, 1], got {a} after {prev}")));
            }
            betas.push(if prev > 0.0 { 1.0 - a / prev } else { 1.0 });
            prev = a;
        }
        let alphas: Vec<f64> = alpha_bars.iter().map(|a| a.sqrt()).collect();
        let sigmas: Vec<f64> = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
        let omega: Vec<f64> = match mode {
            OmegaMode::Const => vec![1.0; alpha_bars.len()],
            OmegaMode::Snr => alpha_bars.iter().map(|a| a / (1.0 - a)).collect(),
        };
        if let Some(t) = omega.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight at step {t} is {}", omega[t])));
        }
        Ok(Self { t_max: alpha_bars.len(), alpha_bars, alphas, sigmas, betas, omega, mode })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn mode(&self) -> OmegaMode {
        self.mode
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_max {
            return Err(Error::TimestepOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega[t]
    }
}

/// Per-timestep affine noise predictor. Parameters are stored block by
/// block: for each `t`, `A_t` row-major and then `b_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    dim: usize,
    t_max: usize,
    params: Vec<f64>,
}

impl Denoiser {
    pub fn zeros(dim: usize, t_max: usize) -> Result<Self> {
        Self::from_params(dim, t_max, vec![0.0; t_max * (dim * dim + dim)])
    }

    pub fn from_params(dim: usize, t_max: usize, params: Vec<f64>) -> Result<Self> {
        if dim == 0 || t_max == 0 {
            return Err(Error::InvalidParameter("denoiser needs positive dimension and step count".into()));
        }
        let expected = t_max * (dim * dim + dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        Ok(Self { dim, t_max, params })
    }

    /// Exact noise predictor for data `N(mean, cov)`:
    /// `A_t = sigma_t (alpha_t^2 cov + sigma_t^2 I)^-1`, `b_t = -A_t alpha_t mean`.
    pub fn gaussian_optimal(schedule: &NoiseSchedule, mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let dim = mean.len();
        cholesky_checked(cov, dim)?;
        let sigma_data = DMatrix::from_fn(dim, dim, |i, j| cov[i][j]);
        let mu = DVector::from_column_slice(mean);
        let mut params = Vec::with_capacity(schedule.t_max() * (dim * dim + dim));
        for t in 0..schedule.t_max() {
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            let m = &sigma_data * (a * a) + DMatrix::identity(dim, dim) * (s * s);
            let inv = m.try_inverse().ok_or_else(|| Error::NotPositiveDefinite(format!("marginal covariance at step {t}")))?;
            let big_a = inv * s;
            let b = -(&big_a * &mu) * a;
            for i in 0..dim {
                for j in 0..dim {
                    params.push(big_a[(i, j)]);
                }
            }
            params.extend(b.iter());
        }
        Self::from_params(dim, schedule.t_max(), params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::from_params(self.dim, self.t_max, params.to_vec())
    }

    /// Index of the first parameter of step `t`.
    pub fn block_offset(&self, t: usize) -> usize {
        t * (self.dim * self.dim + self.dim)
    }

    fn check(&self, x: &[f64], t: usize) -> Result<()> {
        if t >= self.t_max {
            return Err(Error::TimestepOutOfRange { t, t_max: self.t_max });
        }
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(x, t)?;
        let d = self.dim;
        let block = &self.params[self.block_offset(t)..];
        Ok((0..d).map(|i| (0..d).map(|j| block[i * d + j] * x[j]).sum::<f64>() + block[d * d + i]).collect())
    }
}

fn check_compatible(schedule: &NoiseSchedule, models: &[&Denoiser]) -> Result<()> {
    for m in models {
        if m.t_max() != schedule.t_max() {
            return Err(Error::InvalidParameter(format!(
                "denoiser has {} steps but the schedule has {}",
                m.t_max(),
                schedule.t_max()
            )));
        }
        if m.dim() != models[0].dim() {
            return Err(Error::DimensionMismatch { expected: models[0].dim(), got: m.dim() });
        }
    }
    Ok(())
}

/// `alpha_t x0 + sigma_t eps`.
pub fn forward_noise(x0: &Motion, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Motion> {
    schedule.check(t)?;
    if eps.len() != x0.dim() {
        return Err(Error::DimensionMismatch { expected: x0.dim(), got: eps.len() });
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Motion::point(x0.coords().iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Squared error of the predicted noise.
pub fn eps_loss(model: &Denoiser, x_t: &Motion, t: usize, eps: &[f64]) -> Result<f64> {
    Ok(residual(model, x_t, t, eps)?.iter().map(|r| r * r).sum())
}

fn residual(model: &Denoiser, x_t: &Motion, t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: eps.len() });
    }
    let pred = model.predict(x_t.coords(), t)?;
    Ok(pred.iter().zip(eps).map(|(p, e)| p - e).collect())
}

/// Adds `scale * d|A_t x + b_t - eps|^2 / d params` into `grad`.
fn accumulate_sq_grad(model: &Denoiser, x_t: &Motion, t: usize, eps: &[f64], scale: f64, grad: &mut [f64]) -> Result<()> {
    let r = residual(model, x_t, t, eps)?;
    let d = model.dim();
    let off = model.block_offset(t);
    let x = x_t.coords();
    for i in 0..d {
        for j in 0..d {
            grad[off + i * d + j] += scale * 2.0 * r[i] * x[j];
        }
        grad[off + d * d + i] += scale * 2.0 * r[i];
    }
    Ok(())
}

/// Squared-error terms entering one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiffusionLossTerms {
    pub l_theta_w: f64,
    pub l_ref_w: f64,
    pub l_theta_l: f64,
    pub l_ref_l: f64,
}

impl DiffusionLossTerms {
    pub fn delta_w(&self) -> f64 {
        self.l_theta_w - self.l_ref_w
    }

    pub fn delta_l(&self) -> f64 {
        self.l_theta_l - self.l_ref_l
    }
}

/// Placement of `beta` in the pairwise branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// `beta_w dL_w - beta dL_l`.
    #[default]
    Separate,
    /// `beta_w (dL_w - beta dL_l)`.
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionOptions {
    /// Noise the winner and the loser with the same `eps`.
    pub shared_noise: bool,
    pub grouping: Grouping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub terms: DiffusionLossTerms,
    pub branch: Branch,
    pub beta_w: f64,
}

/// Loss and closed-form gradient with respect to `theta`'s parameters.
#[allow(clippy::too_many_arguments)]
pub fn diff_sopo_loss_grad(
    theta: &Denoiser,
    reference: &Denoiser,
    batch: &CandidateBatch,
    winner: &Motion,
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    opts: &DiffusionOptions,
) -> Result<DiffusionLoss> {
    check_compatible(schedule, &[theta, reference])?;
    schedule.check(t)?;
    if winner.dim() != theta.dim() {
        return Err(Error::DimensionMismatch { expected: theta.dim(), got: winner.dim() });
    }
    let beta_w = win_weight(min_similarity(winner, &batch.candidates)?, cfg);
    let x_w = forward_noise(winner, t, eps_w, schedule)?;
    let x_l = forward_noise(batch.loser(), t, eps_l, schedule)?;
    let terms = DiffusionLossTerms {
        l_theta_w: eps_loss(theta, &x_w, t, eps_w)?,
        l_ref_w: eps_loss(reference, &x_w, t, eps_w)?,
        l_theta_l: eps_loss(theta, &x_l, t, eps_l)?,
        l_ref_l: eps_loss(reference, &x_l, t, eps_l)?,
    };
    let scale = schedule.t_max() as f64 * schedule.omega(t);
    let (dz_dw, dz_dl) = match (batch.branch, opts.grouping) {
        (Branch::ValuableUnpreferred, Grouping::Separate) => (-scale * beta_w, scale * cfg.beta),
        (Branch::ValuableUnpreferred, Grouping::Factored) => (-scale * beta_w, scale * beta_w * cfg.beta),
        (Branch::HighPreferenceUnpreferred, _) => (-scale * beta_w, 0.0),
    };
    let z = dz_dw * terms.delta_w() + dz_dl * terms.delta_l();
    let value = softplus(-z);
    let dloss_dz = -sigmoid(-z);
    let mut grad = vec![0.0; theta.n_params()];
    accumulate_sq_grad(theta, &x_w, t, eps_w, dloss_dz * dz_dw, &mut grad)?;
    if dz_dl != 0.0 {
        accumulate_sq_grad(theta, &x_l, t, eps_l, dloss_dz * dz_dl, &mut grad)?;
    }
    Ok(DiffusionLoss { value, grad, terms, branch: batch.branch, beta_w })
}

#[allow(clippy::too_many_arguments)]
pub fn diff_sopo_loss(
    theta: &Denoiser,
    reference: &Denoiser,
    batch: &CandidateBatch,
    winner: &Motion,
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    opts: &DiffusionOptions,
) -> Result<f64> {
    Ok(diff_sopo_loss_grad(theta, reference, batch, winner, t, eps_w, eps_l, schedule, cfg, opts)?.value)
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// DDPM reverse chain from pure noise using the denoiser's noise estimate.
pub fn ancestral_sample_with<R: Rng + ?Sized>(model: &Denoiser, schedule: &NoiseSchedule, rng: &mut R) -> Result<Motion> {
    check_compatible(schedule, &[model])?;
    let mut x = gaussian_vec(rng, model.dim());
    for t in (0..schedule.t_max()).rev() {
        let (beta, sigma) = (schedule.beta(t), schedule.sigma(t));
        if !(sigma > 0.0) || !(beta < 1.0) {
            return Err(Error::InvalidParameter(format!("step {t} is not invertible (sigma {sigma}, beta {beta})")));
        }
        let eps = model.predict(&x, t)?;
        let norm = (1.0 - beta).sqrt();
        x = x.iter().zip(&eps).map(|(xi, ei)| (xi - beta / sigma * ei) / norm).collect();
        if t > 0 {
            let var = beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t));
            let z = gaussian_vec(rng, model.dim());
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += var.sqrt() * zi;
            }
        }
    }
    Motion::point(x)
}

pub fn ancestral_sample(model: &Denoiser, schedule: &NoiseSchedule, c: Condition, seed: u64) -> Result<Motion> {
    c.check(1)?;
    ancestral_sample_with(model, schedule, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A denoiser paired with its schedule, usable as a candidate sampler.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionPolicy<'a> {
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl MotionSampler for DiffusionPolicy<'_> {
    fn draw(&self, c: Condition, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Motion>> {
        c.check(1)?;
        (0..n).map(|_| ancestral_sample_with(self.denoiser, self.schedule, rng)).collect()
    }
}

/// One record's contribution from a single pass of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: usize,
    pub batch: CandidateBatch,
    pub loss: DiffusionLoss,
}

/// Draws `t`, samples `K` candidates from `theta`, selects the loser,
/// branches on `tau` and returns the loss with its gradient.
#[allow(clippy::too_many_arguments)]
pub fn algorithm1_step<R: Rng + ?Sized>(
    theta: &Denoiser,
    reference: &Denoiser,
    record: &PreferenceRecord,
    reward_model: &RewardModel,
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    opts: &DiffusionOptions,
    rng: &mut R,
) -> Result<StepOutcome> {
    let t = rng.random_range(0..schedule.t_max());
    let policy = DiffusionPolicy { denoiser: theta, schedule };
    let mut candidates = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        candidates.push(ancestral_sample_with(policy.denoiser, schedule, rng)?);
    }
    let batch = CandidateBatch::score(record.condition, candidates, reward_model, cfg.tau)?;
    let dim = theta.dim();
    let eps_w = gaussian_vec(rng, dim);
    let eps_l = if opts.shared_noise { eps_w.clone() } else { gaussian_vec(rng, dim) };
    let loss = diff_sopo_loss_grad(theta, reference, &batch, &record.winner, t, &eps_w, &eps_l, schedule, cfg, opts)?;
    Ok(StepOutcome { t, batch, loss })
}

/// Settings of the diffusion training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainParams {
    pub iters: usize,
    pub batch_size: usize,
    pub n_winners: usize,
    pub learning_rate: f64,
    pub ema_window: usize,
}

impl Default for DiffusionTrainParams {
    fn default() -> Self {
        Self { iters: 200, batch_size: 32, n_winners: 256, learning_rate: 1e-5, ema_window: 10 }
    }
}

impl DiffusionTrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_winners == 0 || self.ema_window == 0 {
            return Err(Error::InvalidParameter("batch_size, n_winners and ema_window must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One row of the diffusion training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiffusionCurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub ema: f64,
    pub vu_count: usize,
    pub hu_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainResult {
    pub curve: Vec<DiffusionCurvePoint>,
    pub theta: Denoiser,
    pub reference: Denoiser,
    pub vu_total: usize,
    pub hu_total: usize,
}

const TAG_WINNERS: u64 = 0x44_57;

/// Runs the training loop on the synthetic setup: the reference is the exact
/// denoiser of the initial generator, winners are drawn once from the reward
/// mixture, and `theta` starts at the reference.
pub fn train_diffusion(
    setup: &SyntheticSetup,
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    opts: &DiffusionOptions,
    params: &DiffusionTrainParams,
    seed: u64,
) -> Result<DiffusionTrainResult> {
    cfg.validate()?;
    params.validate()?;
    let gen = &setup.config;
    let cov: Vec<Vec<f64>> = (0..setup.dim())
        .map(|i| (0..setup.dim()).map(|j| if i == j { gen.generator_variance[i] } else { 0.0 }).collect())
        .collect();
    let reference = Denoiser::gaussian_optimal(schedule, &gen.generator_mean, &cov)?;
    let mut theta = reference.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Condition(0), TAG_WINNERS));
    let records: Vec<PreferenceRecord> = (0..params.n_winners)
        .map(|_| Motion::point(setup.preferred.sample(&mut rng)).map(|w| PreferenceRecord::new(Condition(0), w)))
        .collect::<Result<_>>()?;

    let alpha = 2.0 / (params.ema_window as f64 + 1.0);
    let mut curve = Vec::with_capacity(params.iters);
    let mut ema = f64::NAN;
    let (mut vu_total, mut hu_total) = (0, 0);
    for it in 0..params.iters {
        let outcomes: Vec<StepOutcome> = (0..params.batch_size)
            .into_par_iter()
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Condition(j), it as u64));
                let record = &records[rng.random_range(0..records.len())];
                algorithm1_step(&theta, &reference, record, &setup.reward, schedule, cfg, opts, &mut rng)
            })
            .collect::<Result<_>>()?;
        let n = outcomes.len() as f64;
        let loss = outcomes.iter().map(|o| o.loss.value).collect::<CompensatedSum>().value() / n;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("diffusion loss is {loss}") });
        }
        let vu_count = outcomes.iter().filter(|o| o.loss.branch == Branch::ValuableUnpreferred).count();
        let hu_count = outcomes.len() - vu_count;
        vu_total += vu_count;
        hu_total += hu_count;
        ema = if it == 0 { loss } else { alpha * loss + (1.0 - alpha) * ema };
        curve.push(DiffusionCurvePoint { iteration: it, loss, ema, vu_count, hu_count });
        let mut grad = vec![CompensatedSum::new(); theta.n_params()];
        for o in &outcomes {
            for (g, v) in grad.iter_mut().zip(&o.loss.grad) {
                g.add(*v);
            }
        }
        for (p, g) in theta.params_mut().iter_mut().zip(grad) {
            *p -= params.learning_rate * g.value() / n;
        }
        if theta.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { iteration: it, detail: "non-finite denoiser parameter".into() });
        }
    }
    Ok(DiffusionTrainResult { curve, theta, reference, vu_total, hu_total })
}

/// A self-contained loss evaluation with a fixed batch and fixed noise.
#[derive(Debug, Clone)]
pub struct DiffusionInstance {
    pub schedule: NoiseSchedule,
    pub theta: Denoiser,
    pub reference: Denoiser,
    pub batch: CandidateBatch,
    pub winner: Motion,
    pub t: usize,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
    pub cfg: LossConfig,
    pub opts: DiffusionOptions,
}

impl DiffusionInstance {
    /// Random 2D instance whose candidate rewards force `branch`.
    pub fn random(seed: u64, branch: Branch, mode: OmegaMode) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedule = NoiseSchedule::cosine(50, mode)?;
        let dim = 2;
        let base: Vec<f64> = (0..Denoiser::zeros(dim, 50)?.n_params()).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let reference = Denoiser::from_params(dim, 50, base.clone())?;
        let theta = Denoiser::from_params(dim, 50, base.iter().map(|p| p + 0.02 * rng.sample::<f64, _>(StandardNormal)).collect())?;
        let cfg = LossConfig::default();
        let candidates: Vec<Motion> = (0..cfg.k).map(|_| Motion::point(gaussian_vec(&mut rng, dim))).collect::<Result<_>>()?;
        let rewards: Vec<f64> = (0..cfg.k)
            .map(|i| match branch {
                Branch::ValuableUnpreferred if i == 0 => rng.random_range(0.0..cfg.tau),
                _ => rng.random_range(cfg.tau..1.0),
            })
            .collect();
        let batch = CandidateBatch::from_rewards(Condition(0), candidates, rewards, cfg.tau)?;
        let winner = Motion::point(gaussian_vec(&mut rng, dim))?;
        // stay off the small-sigma end so the SNR weight remains moderate
        let t = rng.random_range(5..50);
        let eps_w = gaussian_vec(&mut rng, dim);
        let eps_l = gaussian_vec(&mut rng, dim);
        let opts = DiffusionOptions { shared_noise: false, grouping: if seed.is_multiple_of(2) { Grouping::Separate } else { Grouping::Factored } };
        Ok(Self { schedule, theta, reference, batch, winner, t, eps_w, eps_l, cfg, opts })
    }

    pub fn loss_grad(&self, theta: &Denoiser) -> Result<DiffusionLoss> {
        diff_sopo_loss_grad(theta, &self.reference, &self.batch, &self.winner, self.t, &self.eps_w, &self.eps_l, &self.schedule, &self.cfg, &self.opts)
    }
}

/// Central-difference step used for diffusion gradient checks.
pub const DIFFUSION_FD_STEP: f64 = 1e-6;

/// Analytic gradient against central finite differences.
pub fn check_diffusion_gradient(inst: &DiffusionInstance, h: f64, tol: f64) -> Result<GradientReport> {
    let analytic = inst.loss_grad(&inst.theta)?.grad;
    let fd = finite_diff_grad(|p| Ok(inst.loss_grad(&inst.theta.with_params(p)?)?.value), inst.theta.params(), h)?;
    GradientReport::compare(analytic, fd, tol, oracles::GRAD_ABS_FLOOR)
}

/// Diffusion loss expectation over every `K`-tuple of a finite candidate
/// support, against the branch-probability-weighted conditional means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiffusionSplitReport {
    pub tuple_expectation: f64,
    pub split: f64,
    pub z_vu: f64,
    pub z_hu: f64,
}

impl DiffusionSplitReport {
    pub fn residual(&self) -> f64 {
        (self.tuple_expectation - self.split).abs()
    }
}

/// Enumerates candidate tuples from `support` with probabilities `probs`,
/// keeping `t` and both noise draws fixed.
pub fn diffusion_split_identity(inst: &DiffusionInstance, support: &[Motion], rewards: &[f64], probs: &[f64]) -> Result<DiffusionSplitReport> {
    if support.len() != rewards.len() || support.len() != probs.len() {
        return Err(Error::DimensionMismatch { expected: support.len(), got: rewards.len().min(probs.len()) });
    }
    let cfg = &inst.cfg;
    let mut total = CompensatedSum::new();
    let mut sums = [CompensatedSum::new(), CompensatedSum::new()];
    let mut masses = [CompensatedSum::new(), CompensatedSum::new()];
    for tuple in Tuples::new(support.len(), cfg.k)? {
        let w: f64 = tuple.iter().map(|&i| probs[i]).product();
        if w == 0.0 {
            continue;
        }
        let batch = CandidateBatch::from_rewards(
            Condition(0),
            tuple.iter().map(|&i| support[i].clone()).collect(),
            tuple.iter().map(|&i| rewards[i]).collect(),
            cfg.tau,
        )?;
        let loss = diff_sopo_loss(&inst.theta, &inst.reference, &batch, &inst.winner, inst.t, &inst.eps_w, &inst.eps_l, &inst.schedule, cfg, &inst.opts)?;
        let b = (batch.branch == Branch::HighPreferenceUnpreferred) as usize;
        total.add(w * loss);
        sums[b].add(w * loss);
        masses[b].add(w);
    }
    let (z_vu, z_hu) = oracles::branch_probabilities(probs, rewards, cfg.k, cfg.tau);
    let cond = |b: usize| if masses[b].value() > 0.0 { sums[b].value() / masses[b].value() } else { 0.0 };
    Ok(DiffusionSplitReport { tuple_expectation: total.value(), split: z_vu * cond(0) + z_hu * cond(1), z_vu, z_hu })
}
