//! Online candidate generation: draw `K` motions from the current policy,
//! score them, select the lowest-reward candidate as the loser and decide
//! the threshold branch. Also the pairing rule used to build a fixed
//! best/worst dataset from a frozen pretrained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{argmax_reward, argmin_reward, Branch, LossConfig};
use crate::model::{Condition, Motion, Policy, RewardModel};

/// Anything that can draw motions for a condition.
pub trait MotionSampler {
    fn draw(&self, c: Condition, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Motion>>;
}

impl MotionSampler for Policy {
    fn draw(&self, c: Condition, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Motion>> {
        self.sample_with(c, n, rng)
    }
}

/// `K` scored online candidates for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub condition: Condition,
    pub candidates: Vec<Motion>,
    pub rewards: Vec<f64>,
    pub loser_index: usize,
    pub branch: Branch,
}

impl CandidateBatch {
    /// Scores `candidates` and fills in the loser and branch.
    pub fn score(condition: Condition, candidates: Vec<Motion>, reward_model: &RewardModel, tau: f64) -> Result<Self> {
        let rewards = candidates
            .iter()
            .map(|x| reward_model.reward(x, condition))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rewards(condition, candidates, rewards, tau)
    }

    pub fn from_rewards(condition: Condition, candidates: Vec<Motion>, rewards: Vec<f64>, tau: f64) -> Result<Self> {
        if rewards.len() != candidates.len() {
            return Err(Error::DimensionMismatch { expected: candidates.len(), got: rewards.len() });
        }
        let loser_index = argmin_reward(&rewards)?;
        let branch = Branch::from_reward(rewards[loser_index], tau);
        Ok(Self { condition, candidates, rewards, loser_index, branch })
    }

    pub fn loser(&self) -> &Motion {
        &self.candidates[self.loser_index]
    }

    pub fn loser_reward(&self) -> f64 {
        self.rewards[self.loser_index]
    }
}

/// Per-step seed for `(master, condition, iteration)`, so batches for
/// different conditions can be generated independently and in any order.
pub fn stream_seed(master: u64, condition: Condition, iteration: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ condition.0 as u64) ^ iteration)
}

/// When online candidates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regeneration {
    /// Fresh candidates at every optimisation step.
    #[default]
    PerStep,
    /// Candidates drawn once and reused, emulating a fixed offline dataset.
    Frozen,
}

/// Samples `cfg.k` candidates, scores them and selects the loser.
pub fn generate_candidates<S: MotionSampler + ?Sized>(
    policy: &S,
    reward_model: &RewardModel,
    c: Condition,
    cfg: &LossConfig,
    seed: u64,
) -> Result<CandidateBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_candidates_with(policy, reward_model, c, cfg, &mut rng)
}

pub fn generate_candidates_with<S: MotionSampler + ?Sized, R: Rng>(
    policy: &S,
    reward_model: &RewardModel,
    c: Condition,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<CandidateBatch> {
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let candidates = policy.draw(c, cfg.k, rng)?;
    CandidateBatch::score(c, candidates, reward_model, cfg.tau)
}

/// Best/worst pair out of `cfg.k` samples of a frozen pretrained policy.
pub fn modipo_pairing<S: MotionSampler + ?Sized>(
    pretrained: &S,
    reward_model: &RewardModel,
    c: Condition,
    cfg: &LossConfig,
    seed: u64,
) -> Result<(Motion, Motion)> {
    if cfg.k < 2 {
        return Err(Error::InvalidParameter("pairing needs k >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = pretrained.draw(c, cfg.k, &mut rng)?;
    pair_from_candidates(&candidates, reward_model, c)
}

/// Best/worst pair out of an explicit candidate list.
pub fn pair_from_candidates(candidates: &[Motion], reward_model: &RewardModel, c: Condition) -> Result<(Motion, Motion)> {
    let rewards = candidates.iter().map(|x| reward_model.reward(x, c)).collect::<Result<Vec<_>>>()?;
    let best = argmax_reward(&rewards)?;
    let worst = argmin_reward(&rewards)?;
    Ok((candidates[best].clone(), candidates[worst].clone()))
}
