//! 2D synthetic alignment benchmark.
//!
//! A diagonal Gaussian generator is fine-tuned towards a two-component
//! Gaussian-mixture reward under four regimes:
//!
//! * `offline`: a fixed dataset of (mixture sample, off-mode sample) pairs
//!   trained with pairwise DPO;
//! * `online`: `K` fresh samples from the current policy per prompt, ranked by
//!   reward and trained with the Plackett-Luce online loss;
//! * `modipo`: a fixed dataset of best/worst pairs picked from `K` samples of
//!   the frozen initial model;
//! * `sopo`: the offline winners paired with online candidates under the full
//!   semi-online loss.
//!
//! All regimes start from the same policy, share the reference snapshot and
//! the reward, and are evaluated on the same Monte-Carlo seeds.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossGrad, PreferenceRecord};
use crate::model::{cholesky_checked, Condition, GaussianPolicy, MixtureComponent, MixtureReward, Motion, Policy, ReferenceSnapshot, RewardModel};
use crate::numeric::CompensatedSum;
use crate::sampler::{generate_candidates, modipo_pairing, stream_seed, Regeneration};

const PROMPT: Condition = Condition(0);

// stream tags, so that each data source draws from its own seed stream
const TAG_WINNERS: u64 = 0x57;
const TAG_LOSERS: u64 = 0x4c;
const TAG_PAIRING: u64 = 0x4d;
const TAG_ONLINE: u64 = 0x4f;
const TAG_EVAL: u64 = 0x45;

/// Distributions of the synthetic setup. Unset fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetupConfig {
    pub generator_mean: Vec<f64>,
    /// Diagonal of the generator covariance.
    pub generator_variance: Vec<f64>,
    pub reward_components: Vec<MixtureComponent>,
    pub offline_unpreferred_mean: Vec<f64>,
    pub offline_unpreferred_covariance: Vec<Vec<f64>>,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            generator_mean: vec![-2.0, 1.0],
            generator_variance: vec![2.0, 2.0],
            reward_components: vec![
                MixtureComponent { mean: vec![-3.0, 2.0], covariance: vec![vec![1.0, 0.5], vec![0.5, 1.0]], weight: 0.5 },
                MixtureComponent { mean: vec![2.0, -2.0], covariance: vec![vec![1.0, -0.5], vec![-0.5, 1.0]], weight: 0.5 },
            ],
            offline_unpreferred_mean: vec![0.0, 3.0],
            offline_unpreferred_covariance: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
        }
    }
}

/// Full-covariance Gaussian sampler.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSource {
    pub fn new(mean: &[f64], covariance: &[Vec<f64>]) -> Result<Self> {
        let chol = cholesky_checked(covariance, mean.len())?;
        Ok(Self { mean: DVector::from_column_slice(mean), factor: chol.l() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.factor * z).iter().copied().collect()
    }
}

/// Draws from a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    weights: Vec<f64>,
    sources: Vec<GaussianSource>,
}

impl MixtureSampler {
    pub fn new(components: &[MixtureComponent]) -> Result<Self> {
        let sources = components.iter().map(|c| GaussianSource::new(&c.mean, &c.covariance)).collect::<Result<_>>()?;
        Ok(Self { weights: components.iter().map(|c| c.weight).collect(), sources })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.sources.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.sources[pick].sample(rng)
    }
}

/// The constructed benchmark distributions.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub config: SetupConfig,
    pub generator: Policy,
    pub reference: ReferenceSnapshot,
    pub reward: RewardModel,
    pub preferred: MixtureSampler,
    pub offline_unpreferred: GaussianSource,
}

impl SyntheticSetup {
    pub fn mixture(&self) -> &MixtureReward {
        match &self.reward {
            RewardModel::GaussianMixture(m) => m,
            _ => unreachable!("built as a mixture"),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.generator_mean.len()
    }
}

pub fn build_setup(config: &SetupConfig) -> Result<SyntheticSetup> {
    let dim = config.generator_mean.len();
    if config.generator_variance.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: config.generator_variance.len() });
    }
    if config.generator_variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("generator variance {:?}", config.generator_variance)));
    }
    let generator = Policy::Gaussian(GaussianPolicy::from_mean_variance(&config.generator_mean, &config.generator_variance)?);
    let mixture = MixtureReward::new(config.reward_components.clone())?;
    if mixture.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: mixture.dim() });
    }
    let offline_unpreferred = GaussianSource::new(&config.offline_unpreferred_mean, &config.offline_unpreferred_covariance)?;
    if offline_unpreferred.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: offline_unpreferred.dim() });
    }
    Ok(SyntheticSetup {
        config: config.clone(),
        reference: ReferenceSnapshot::freeze(&generator),
        generator,
        preferred: MixtureSampler::new(&config.reward_components)?,
        reward: RewardModel::GaussianMixture(mixture),
        offline_unpreferred,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Offline,
    Online,
    Modipo,
    Sopo,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Offline, Regime::Online, Regime::Modipo, Regime::Sopo];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Offline => "offline",
            Regime::Online => "online",
            Regime::Modipo => "modipo",
            Regime::Sopo => "sopo",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimisation and evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub learning_rate: f64,
    pub iters: usize,
    /// Records per step (dataset size for the fixed-data regimes).
    pub n_pairs: usize,
    pub eval_every: usize,
    pub n_eval: usize,
    pub regeneration: Regeneration,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self { learning_rate: 0.05, iters: 500, n_pairs: 64, eval_every: 25, n_eval: 4000, regeneration: Regeneration::PerStep }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.n_pairs == 0 || self.eval_every == 0 {
            return Err(Error::InvalidParameter("n_pairs and eval_every must be positive".into()));
        }
        if self.n_eval < MIN_EVAL_SAMPLES {
            return Err(Error::InvalidParameter(format!("n_eval must be at least {MIN_EVAL_SAMPLES}")));
        }
        Ok(())
    }
}

/// Smallest Monte-Carlo sample accepted by [`evaluate_policy`].
pub const MIN_EVAL_SAMPLES: usize = 1000;

/// Monte-Carlo reward statistics of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub mean_reward_se: f64,
    /// Fraction of samples with reward below `tau`.
    pub low_reward_mass: f64,
    pub low_reward_mass_se: f64,
}

pub fn evaluate_policy(policy: &Policy, setup: &SyntheticSetup, tau: f64, n_mc: usize, seed: u64) -> Result<Evaluation> {
    if n_mc < MIN_EVAL_SAMPLES {
        return Err(Error::InvalidParameter(format!("n_mc must be at least {MIN_EVAL_SAMPLES}, got {n_mc}")));
    }
    let samples = policy.sample(PROMPT, n_mc, seed)?;
    let rewards: Vec<f64> = samples.iter().map(|x| setup.reward.reward(x, PROMPT)).collect::<Result<_>>()?;
    let n = n_mc as f64;
    let mean: f64 = rewards.iter().copied().collect::<CompensatedSum>().value() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let low = rewards.iter().filter(|r| **r < tau).count() as f64 / n;
    Ok(Evaluation {
        mean_reward: mean,
        mean_reward_se: (var / n).sqrt(),
        low_reward_mass: low,
        low_reward_mass_se: (low * (1.0 - low) / n).sqrt(),
    })
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub low_reward_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub regime: Regime,
    pub seed: u64,
    pub mean_reward: f64,
    pub mean_reward_se: f64,
    pub low_reward_mass: f64,
    pub low_reward_mass_se: f64,
    pub final_params: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Evaluation seed shared by every regime trained with `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    stream_seed(seed, PROMPT, TAG_EVAL)
}

fn draw_points<F>(n: usize, seed: u64, mut f: F) -> Result<Vec<Motion>>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Motion::point(f(&mut rng))).collect()
}

/// Fixed data a regime trains on.
enum Data {
    Pairs(Vec<(Motion, Motion)>),
    Prompts(usize),
    Winners(Vec<PreferenceRecord>),
}

fn regime_data(setup: &SyntheticSetup, regime: Regime, cfg: &LossConfig, params: &BenchParams, seed: u64) -> Result<Data> {
    let n = params.n_pairs;
    let winners = || draw_points(n, stream_seed(seed, PROMPT, TAG_WINNERS), |r| setup.preferred.sample(r));
    Ok(match regime {
        Regime::Offline => {
            let losers = draw_points(n, stream_seed(seed, PROMPT, TAG_LOSERS), |r| setup.offline_unpreferred.sample(r))?;
            Data::Pairs(winners()?.into_iter().zip(losers).collect())
        }
        Regime::Modipo => Data::Pairs(
            (0..n)
                .map(|i| modipo_pairing(setup.reference.policy(), &setup.reward, PROMPT, cfg, stream_seed(seed ^ TAG_PAIRING, Condition(i), 0)))
                .collect::<Result<_>>()?,
        ),
        Regime::Online => Data::Prompts(n),
        Regime::Sopo => Data::Winners(winners()?.into_iter().map(|w| PreferenceRecord::new(PROMPT, w)).collect()),
    })
}

fn mean_loss_grad(parts: Vec<LossGrad>, n_params: usize) -> (f64, Vec<f64>) {
    let n = parts.len() as f64;
    let mut value = CompensatedSum::new();
    let mut grad = vec![CompensatedSum::new(); n_params];
    for part in &parts {
        value.add(part.value);
        for (g, p) in grad.iter_mut().zip(&part.grad) {
            g.add(*p);
        }
    }
    (value.value() / n, grad.into_iter().map(|g| g.value() / n).collect())
}

fn step_loss_grad(
    policy: &Policy,
    setup: &SyntheticSetup,
    data: &Data,
    cfg: &LossConfig,
    regeneration: Regeneration,
    seed: u64,
    iteration: usize,
) -> Result<(f64, Vec<f64>)> {
    let reference = &setup.reference;
    let draw_iter = match regeneration {
        Regeneration::PerStep => iteration as u64,
        Regeneration::Frozen => 0,
    };
    let online_seed = |j: usize| stream_seed(seed ^ TAG_ONLINE, Condition(j), draw_iter);
    let parts: Vec<LossGrad> = match data {
        Data::Pairs(pairs) => pairs
            .par_iter()
            .map(|(w, l)| losses::dpo_pairwise_loss_grad(policy, reference, w, l, PROMPT, cfg))
            .collect::<Result<_>>()?,
        Data::Prompts(n) => (0..*n)
            .into_par_iter()
            .map(|j| {
                let batch = generate_candidates(policy, &setup.reward, PROMPT, cfg, online_seed(j))?;
                losses::online_dpo_scored(policy, reference, &batch.candidates, &batch.rewards, PROMPT, cfg)
            })
            .collect::<Result<_>>()?,
        Data::Winners(records) => records
            .par_iter()
            .enumerate()
            .map(|(j, rec)| {
                let batch = generate_candidates(policy, &setup.reward, PROMPT, cfg, online_seed(j))?;
                losses::sopo_scored(policy, reference, rec, &batch.candidates, &batch.rewards, PROMPT, cfg)
            })
            .collect::<Result<_>>()?,
    };
    Ok(mean_loss_grad(parts, policy.n_params()))
}

/// Trains one regime from the setup's initial generator with plain gradient
/// descent.
pub fn train_regime(setup: &SyntheticSetup, regime: Regime, cfg: &LossConfig, params: &BenchParams, seed: u64) -> Result<BenchResult> {
    cfg.validate()?;
    params.validate()?;
    let data = regime_data(setup, regime, cfg, params, seed)?;
    let eval = eval_seed(seed);
    let mut policy = setup.generator.clone();
    let mut curve = Vec::new();
    for it in 0..=params.iters {
        let (loss, grad) = step_loss_grad(&policy, setup, &data, cfg, params.regeneration, seed, it)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("{regime} loss is {loss}") });
        }
        if it % params.eval_every == 0 || it == params.iters {
            let e = evaluate_policy(&policy, setup, cfg.tau, params.n_eval, eval)?;
            curve.push(CurvePoint { iteration: it, loss, mean_reward: e.mean_reward, low_reward_mass: e.low_reward_mass });
        }
        if it == params.iters {
            break;
        }
        for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
            *p -= params.learning_rate * g;
        }
        if let Some(i) = policy.params().iter().position(|p| !p.is_finite()) {
            return Err(Error::Diverged { iteration: it, detail: format!("{regime} parameter {i} is non-finite") });
        }
    }
    let e = evaluate_policy(&policy, setup, cfg.tau, params.n_eval, eval)?;
    Ok(BenchResult {
        regime,
        seed,
        mean_reward: e.mean_reward,
        mean_reward_se: e.mean_reward_se,
        low_reward_mass: e.low_reward_mass,
        low_reward_mass_se: e.low_reward_mass_se,
        final_params: policy.params().to_vec(),
        curve,
    })
}

/// Every regime for every seed, in `(seed, regime)` order.
pub fn run_all(setup: &SyntheticSetup, cfg: &LossConfig, params: &BenchParams, seeds: &[u64]) -> Result<Vec<BenchResult>> {
    let jobs: Vec<(u64, Regime)> = seeds.iter().flat_map(|&s| Regime::ALL.map(|r| (s, r))).collect();
    jobs.par_iter().map(|&(s, r)| train_regime(setup, r, cfg, params, s)).collect()
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("correlation needs at least two points".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Rank correlation between the policy's density and the reward on its own
/// samples.
pub fn density_reward_correlation(policy: &Policy, setup: &SyntheticSetup, n: usize, seed: u64) -> Result<f64> {
    let samples = policy.sample(PROMPT, n, seed)?;
    let dens: Vec<f64> = samples.iter().map(|x| policy.log_prob(x, PROMPT)).collect::<Result<_>>()?;
    let rew: Vec<f64> = samples.iter().map(|x| setup.reward.reward(x, PROMPT)).collect::<Result<_>>()?;
    spearman(&dens, &rew)
}
