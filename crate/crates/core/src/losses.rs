//! The preference-loss family: pairwise DPO, Plackett-Luce offline DPO,
//! online DPO with reward-derived rank targets, and the semi-online losses
//! (direct, unified and reweighted).
//!
//! Every loss is evaluated in two layers. A *kernel* works purely on
//! log-ratios `h = log pi/pi_ref` and returns the value together with
//! `dL/dh`. The policy-level wrappers compute the log-ratios of the motions
//! involved and chain the kernel derivative through the policy's score
//! function, which gives exact parameter gradients for the explicit policies
//! in [`crate::model`].
//!
//! Candidates produced online are constants: no loss ever differentiates
//! through the sampling distribution that produced them.

use serde::{Deserialize, Serialize};

use crate::enumerate;
use crate::error::{Error, Result};
use crate::model::{grad_log_ratio, log_ratio, Condition, Motion, Policy, ReferenceSnapshot, RewardModel};
use crate::numeric::{compensated_sum, log_sum_exp, neg_log_sigmoid, sigmoid};

/// Hyperparameters shared by the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature on the log-ratios.
    pub beta: f64,
    /// Reward threshold separating valuable unpreferred candidates.
    pub tau: f64,
    /// Reweighting constant `C >= 1`.
    pub c_const: f64,
    /// Number of online candidates per condition.
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1.0, tau: 0.45, c_const: 2.0, k: 4 }
    }
}

impl LossConfig {
    pub fn new(beta: f64, tau: f64, c_const: f64, k: usize) -> Result<Self> {
        let cfg = Self { beta, tau, c_const, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.c_const >= 1.0) || !self.c_const.is_finite() {
            return Err(Error::InvalidParameter(format!("c_const must be >= 1, got {}", self.c_const)));
        }
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// One offline training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub condition: Condition,
    pub winner: Motion,
    /// Best-first ranked group; when present its head is `winner`.
    pub ranked_group: Option<Vec<Motion>>,
}

impl PreferenceRecord {
    pub fn new(condition: Condition, winner: Motion) -> Self {
        Self { condition, winner, ranked_group: None }
    }

    pub fn ranked(condition: Condition, group: Vec<Motion>) -> Result<Self> {
        let winner = group.first().cloned().ok_or(Error::MissingGroup)?;
        for (i, a) in group.iter().enumerate() {
            if a.item_index().is_some() && group[i + 1..].iter().any(|b| b.item_index() == a.item_index()) {
                return Err(Error::InvalidParameter("ranked group repeats an item".into()));
            }
        }
        Ok(Self { condition, winner, ranked_group: Some(group) })
    }
}

/// Per-rank Plackett-Luce probabilities `p_k = w_k / sum_{j>=k} w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProbabilities(Vec<f64>);

impl RankProbabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Probability of the whole ranking.
    pub fn joint(&self) -> f64 {
        self.0.iter().product()
    }
}

/// Plackett-Luce rank probabilities from positive weights.
pub fn pl_rank_probs(weights: &[f64]) -> Result<RankProbabilities> {
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::NonPositiveWeight { index, value });
    }
    let k = weights.len();
    let mut probs = vec![0.0; k];
    for i in 0..k {
        probs[i] = if i + 1 == k { 1.0 } else { weights[i] / compensated_sum(weights[i..].iter().copied()) };
    }
    Ok(RankProbabilities(probs))
}

/// Log rank probabilities from log-weights, computed with suffix log-sum-exp.
pub fn pl_log_rank_probs(log_weights: &[f64]) -> Vec<f64> {
    let k = log_weights.len();
    (0..k)
        .map(|i| if i + 1 == k { 0.0 } else { log_weights[i] - log_sum_exp(&log_weights[i..]) })
        .collect()
}

/// Value of a loss and its derivative with respect to each consumed log-ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    pub d_h: Vec<f64>,
}

/// `-log sigma(beta (h_w - h_l))`; `d_h = [dL/dh_w, dL/dh_l]`.
pub fn pairwise_kernel(h_w: f64, h_l: f64, beta: f64) -> KernelValue {
    let z = beta * (h_w - h_l);
    let dz = -sigmoid(-z);
    KernelValue { value: neg_log_sigmoid(z), d_h: vec![beta * dz, -beta * dz] }
}

/// `-sum_k rank_weights[k] log p_theta(k)` with Plackett-Luce `p_theta`
/// over `exp(beta h)` in the given (best-first) order.
pub fn ranked_kernel(h: &[f64], rank_weights: &[f64], beta: f64) -> KernelValue {
    let k = h.len();
    let scaled: Vec<f64> = h.iter().map(|v| beta * v).collect();
    let mut value = Vec::with_capacity(k);
    let mut d_h = vec![0.0; k];
    for r in 0..k {
        let lse = log_sum_exp(&scaled[r..]);
        value.push(-rank_weights[r] * (scaled[r] - lse));
        d_h[r] -= rank_weights[r] * beta;
        for i in r..k {
            d_h[i] += rank_weights[r] * beta * (scaled[i] - lse).exp();
        }
    }
    KernelValue { value: compensated_sum(value), d_h }
}

/// Semi-online kernel `-log sigma(beta_w h_w - beta h_l)`, or the winner-only
/// `-log sigma(beta_w h_w)` when no loser is used.
pub fn semi_online_kernel(h_w: f64, h_l: Option<f64>, beta_w: f64, beta: f64) -> KernelValue {
    match h_l {
        Some(h_l) => {
            let z = beta_w * h_w - beta * h_l;
            let dz = -sigmoid(-z);
            KernelValue { value: neg_log_sigmoid(z), d_h: vec![beta_w * dz, -beta * dz] }
        }
        None => {
            let z = beta_w * h_w;
            let dz = -sigmoid(-z);
            KernelValue { value: neg_log_sigmoid(z), d_h: vec![beta_w * dz, 0.0] }
        }
    }
}

/// Loss value and its gradient with respect to the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn chain(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    motions: &[&Motion],
    c: Condition,
    kernel: KernelValue,
) -> Result<LossGrad> {
    let mut grad = vec![0.0; policy.n_params()];
    for (m, d) in motions.iter().zip(&kernel.d_h) {
        if *d == 0.0 {
            continue;
        }
        for (g, s) in grad.iter_mut().zip(grad_log_ratio(policy, reference, m, c)?) {
            *g += d * s;
        }
    }
    Ok(LossGrad { value: kernel.value, grad })
}

fn ratios(policy: &Policy, reference: &ReferenceSnapshot, motions: &[&Motion], c: Condition) -> Result<Vec<f64>> {
    motions.iter().map(|m| log_ratio(policy, reference, m, c)).collect()
}

/// Pairwise DPO: `-log sigma(beta (h(winner) - h(loser)))`.
pub fn dpo_pairwise_loss(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    winner: &Motion,
    loser: &Motion,
    c: Condition,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(dpo_pairwise_loss_grad(policy, reference, winner, loser, c, cfg)?.value)
}

pub fn dpo_pairwise_loss_grad(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    winner: &Motion,
    loser: &Motion,
    c: Condition,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    let motions = [winner, loser];
    let h = ratios(policy, reference, &motions, c)?;
    chain(policy, reference, &motions, c, pairwise_kernel(h[0], h[1], cfg.beta))
}

/// Plackett-Luce offline DPO on a ranked group.
pub fn pl_offline_loss(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    record: &PreferenceRecord,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(pl_offline_loss_grad(policy, reference, record, cfg)?.value)
}

pub fn pl_offline_loss_grad(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    record: &PreferenceRecord,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    let group = record.ranked_group.as_ref().ok_or(Error::MissingGroup)?;
    let motions: Vec<&Motion> = group.iter().collect();
    let h = ratios(policy, reference, &motions, record.condition)?;
    let ones = vec![1.0; h.len()];
    chain(policy, reference, &motions, record.condition, ranked_kernel(&h, &ones, cfg.beta))
}

/// Indices of `rewards` sorted best-first; ties keep candidate order.
pub fn rank_by_reward(rewards: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Reward-derived Plackett-Luce targets `p_r(k)` for rewards already in
/// best-first order.
pub fn reward_rank_targets(sorted_rewards: &[f64]) -> Vec<f64> {
    pl_log_rank_probs(sorted_rewards).into_iter().map(f64::exp).collect()
}

fn score_all(reward_model: &RewardModel, candidates: &[Motion], c: Condition) -> Result<Vec<f64>> {
    candidates.iter().map(|x| reward_model.reward(x, c)).collect()
}

/// Online DPO: candidates are ranked by reward and the policy's
/// Plackett-Luce rank likelihood is fitted to the reward's rank distribution.
pub fn online_dpo_loss(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    reward_model: &RewardModel,
    candidates: &[Motion],
    c: Condition,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(online_dpo_loss_grad(policy, reference, reward_model, candidates, c, cfg)?.value)
}

pub fn online_dpo_loss_grad(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    reward_model: &RewardModel,
    candidates: &[Motion],
    c: Condition,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    let rewards = score_all(reward_model, candidates, c)?;
    online_dpo_scored(policy, reference, candidates, &rewards, c, cfg)
}

/// Online DPO with rewards supplied by the caller.
pub fn online_dpo_scored(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    candidates: &[Motion],
    rewards: &[f64],
    c: Condition,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    if candidates.len() < 2 {
        return Err(Error::InvalidParameter("online DPO needs at least two candidates".into()));
    }
    if rewards.len() != candidates.len() {
        return Err(Error::DimensionMismatch { expected: candidates.len(), got: rewards.len() });
    }
    let order = rank_by_reward(rewards);
    let motions: Vec<&Motion> = order.iter().map(|&i| &candidates[i]).collect();
    let sorted: Vec<f64> = order.iter().map(|&i| rewards[i]).collect();
    let targets = reward_rank_targets(&sorted);
    let h = ratios(policy, reference, &motions, c)?;
    chain(policy, reference, &motions, c, ranked_kernel(&h, &targets, cfg.beta))
}

/// Index of the lowest reward; the first such index on ties.
pub fn argmin_reward(rewards: &[f64]) -> Result<usize> {
    if rewards.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate().skip(1) {
        if *r < rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Index of the highest reward; the first such index on ties.
pub fn argmax_reward(rewards: &[f64]) -> Result<usize> {
    if rewards.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate().skip(1) {
        if *r > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Smallest cosine similarity between the winner and any candidate.
pub fn min_similarity(winner: &Motion, candidates: &[Motion]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    candidates
        .iter()
        .map(|x| crate::model::cosine_similarity(winner, x))
        .try_fold(f64::INFINITY, |m, s| Ok(m.min(s?)))
}

/// Winner weight `beta (C - s)`.
pub fn win_weight(s: f64, cfg: &LossConfig) -> f64 {
    cfg.beta * (cfg.c_const - s)
}

/// Which branch a candidate batch falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// The lowest reward is below `tau`: the loser is a genuine negative.
    ValuableUnpreferred,
    /// Every candidate is at or above `tau`: train on the winner alone.
    HighPreferenceUnpreferred,
}

impl Branch {
    pub fn from_reward(loser_reward: f64, tau: f64) -> Self {
        if loser_reward < tau {
            Branch::ValuableUnpreferred
        } else {
            Branch::HighPreferenceUnpreferred
        }
    }
}

/// How the winner term is weighted in the semi-online losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Weighting {
    /// Always use a loser (direct form).
    Direct,
    /// Branch on tau, winner weight beta.
    Unified,
    /// Branch on tau, winner weight beta (C - S).
    Reweighted,
}

fn semi_online(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    record: &PreferenceRecord,
    candidates: &[Motion],
    rewards: &[f64],
    c: Condition,
    cfg: &LossConfig,
    weighting: Weighting,
) -> Result<LossGrad> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if rewards.len() != candidates.len() {
        return Err(Error::DimensionMismatch { expected: candidates.len(), got: rewards.len() });
    }
    let loser_idx = argmin_reward(rewards)?;
    let winner = &record.winner;
    let loser = &candidates[loser_idx];
    let branch = Branch::from_reward(rewards[loser_idx], cfg.tau);
    let beta_w = match weighting {
        Weighting::Reweighted => win_weight(min_similarity(winner, candidates)?, cfg),
        Weighting::Direct | Weighting::Unified => cfg.beta,
    };
    let use_loser = weighting == Weighting::Direct || branch == Branch::ValuableUnpreferred;
    let motions = [winner, loser];
    let h_w = log_ratio(policy, reference, winner, c)?;
    let kernel = if use_loser {
        let h_l = log_ratio(policy, reference, loser, c)?;
        if weighting == Weighting::Direct {
            pairwise_kernel(h_w, h_l, cfg.beta)
        } else {
            semi_online_kernel(h_w, Some(h_l), beta_w, cfg.beta)
        }
    } else {
        semi_online_kernel(h_w, None, beta_w, cfg.beta)
    };
    chain(policy, reference, &motions, c, kernel)
}

macro_rules! semi_online_loss {
    ($(#[$doc:meta])* $name:ident, $grad:ident, $scored:ident, $weighting:expr) => {
        $(#[$doc])*
        pub fn $name(
            policy: &Policy,
            reference: &ReferenceSnapshot,
            reward_model: &RewardModel,
            record: &PreferenceRecord,
            candidates: &[Motion],
            c: Condition,
            cfg: &LossConfig,
        ) -> Result<f64> {
            Ok($grad(policy, reference, reward_model, record, candidates, c, cfg)?.value)
        }

        pub fn $grad(
            policy: &Policy,
            reference: &ReferenceSnapshot,
            reward_model: &RewardModel,
            record: &PreferenceRecord,
            candidates: &[Motion],
            c: Condition,
            cfg: &LossConfig,
        ) -> Result<LossGrad> {
            let rewards = score_all(reward_model, candidates, c)?;
            $scored(policy, reference, record, candidates, &rewards, c, cfg)
        }

        /// Same loss with candidate rewards supplied by the caller.
        pub fn $scored(
            policy: &Policy,
            reference: &ReferenceSnapshot,
            record: &PreferenceRecord,
            candidates: &[Motion],
            rewards: &[f64],
            c: Condition,
            cfg: &LossConfig,
        ) -> Result<LossGrad> {
            semi_online(policy, reference, record, candidates, rewards, c, cfg, $weighting)
        }
    };
}

semi_online_loss!(
    /// Direct semi-online loss: offline winner against the lowest-reward
    /// online candidate, always.
    dsopo_loss, dsopo_loss_grad, dsopo_scored, Weighting::Direct
);
semi_online_loss!(
    /// Unified semi-online loss: pairwise term when the lowest reward is
    /// below `tau`, winner-only term otherwise.
    usopo_loss, usopo_loss_grad, usopo_scored, Weighting::Unified
);
semi_online_loss!(
    /// Full semi-online loss: the unified branches with the winner weighted
    /// by `beta (C - S)`, `S` the minimum winner/candidate cosine similarity.
    sopo_loss, sopo_loss_grad, sopo_scored, Weighting::Reweighted
);

/// Exact expectations over all i.i.d. `K`-tuples of a categorical sampler.
///
/// The sampler supplies the tuple weights only; it is never differentiated,
/// so passing the current policy here evaluates the loss with frozen
/// sampling weights.
pub mod exact {
    use super::*;

    fn sampler_probs(sampler: &Policy, c: Condition) -> Result<Vec<f64>> {
        sampler
            .as_categorical()
            .ok_or_else(|| Error::KindMismatch("exact expectations need a categorical sampler".into()))?
            .probs(c)
    }

    fn tuple_motions(sampler: &Policy, tuple: &[usize]) -> Vec<Motion> {
        let vocab = sampler.as_categorical().expect("checked categorical").vocab();
        tuple.iter().map(|&i| vocab.motion(i)).collect()
    }

    fn semi_online_expectation(
        policy: &Policy,
        sampler: &Policy,
        reference: &ReferenceSnapshot,
        reward_model: &RewardModel,
        record: &PreferenceRecord,
        cfg: &LossConfig,
        weighting: Weighting,
    ) -> Result<f64> {
        let c = record.condition;
        let probs = sampler_probs(sampler, c)?;
        enumerate::expectation(&probs, cfg.k, |tuple| {
            let candidates = tuple_motions(sampler, tuple);
            let rewards = score_all(reward_model, &candidates, c)?;
            Ok(semi_online(policy, reference, record, &candidates, &rewards, c, cfg, weighting)?.value)
        })
    }

    pub fn dsopo(
        policy: &Policy,
        sampler: &Policy,
        reference: &ReferenceSnapshot,
        reward_model: &RewardModel,
        record: &PreferenceRecord,
        cfg: &LossConfig,
    ) -> Result<f64> {
        semi_online_expectation(policy, sampler, reference, reward_model, record, cfg, Weighting::Direct)
    }

    pub fn usopo(
        policy: &Policy,
        sampler: &Policy,
        reference: &ReferenceSnapshot,
        reward_model: &RewardModel,
        record: &PreferenceRecord,
        cfg: &LossConfig,
    ) -> Result<f64> {
        semi_online_expectation(policy, sampler, reference, reward_model, record, cfg, Weighting::Unified)
    }

    pub fn sopo(
        policy: &Policy,
        sampler: &Policy,
        reference: &ReferenceSnapshot,
        reward_model: &RewardModel,
        record: &PreferenceRecord,
        cfg: &LossConfig,
    ) -> Result<f64> {
        semi_online_expectation(policy, sampler, reference, reward_model, record, cfg, Weighting::Reweighted)
    }

    /// Exact online DPO loss for condition `c`.
    pub fn online_dpo(
        policy: &Policy,
        sampler: &Policy,
        reference: &ReferenceSnapshot,
        reward_model: &RewardModel,
        c: Condition,
        cfg: &LossConfig,
    ) -> Result<f64> {
        let probs = sampler_probs(sampler, c)?;
        enumerate::expectation(&probs, cfg.k, |tuple| {
            let candidates = tuple_motions(sampler, tuple);
            online_dpo_loss(policy, reference, reward_model, &candidates, c, cfg)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CategoricalPolicy, Vocabulary};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;
    use std::sync::Arc;

    fn cat(vocab: &Arc<Vocabulary>, logits: Vec<f64>) -> Policy {
        Policy::Categorical(CategoricalPolicy::new(vocab.clone(), 1, logits).unwrap())
    }

    fn vocab(n: usize) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::random(n, 3, 11).unwrap())
    }

    // Direct transcription of the ranked objective: -log prod_k w_k / sum_{j>=k} w_j.
    fn pl_reference(h: &[f64], beta: f64) -> f64 {
        let w: Vec<f64> = h.iter().map(|v| (beta * v).exp()).collect();
        let mut prod = 1.0;
        for k in 0..w.len() {
            prod *= w[k] / w[k..].iter().sum::<f64>();
        }
        -prod.ln()
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(1.0, 0.45, 2.0, 4).is_ok());
        assert!(LossConfig::new(0.0, 0.45, 2.0, 4).is_err());
        assert!(LossConfig::new(1.0, 1.0, 2.0, 4).is_err());
        assert!(LossConfig::new(1.0, 0.45, 0.5, 4).is_err());
        assert!(LossConfig::new(1.0, 0.45, 2.0, 1).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let v = vocab(3);
        let p = cat(&v, vec![0.2, -0.4, 1.0]);
        let same = ReferenceSnapshot::freeze(&p);
        let cfg = LossConfig::default();
        let l = dpo_pairwise_loss(&p, &same, &v.motion(0), &v.motion(2), Condition(0), &cfg).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);
        assert!(pairwise_kernel(800.0, 0.0, 1.0).value < 1e-300);
        assert_abs_diff_eq!(pairwise_kernel(0.3, 0.3, 2.0).value, LN_2, epsilon = 1e-15);
    }

    #[test]
    fn rank_probability_examples() {
        let p = pl_rank_probs(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(p.len(), 3);
        assert_abs_diff_eq!(p.as_slice()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 0.5, epsilon = 1e-15);
        assert_eq!(p.as_slice()[2], 1.0);
        let e = std::f64::consts::E;
        let p = pl_rank_probs(&[e, 1.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[0], 0.7311, epsilon = 1e-4);
        assert_eq!(pl_rank_probs(&[0.3]).unwrap().as_slice(), &[1.0]);
        assert!(matches!(pl_rank_probs(&[1.0, 0.0]), Err(Error::NonPositiveWeight { index: 1, .. })));
        assert!(matches!(pl_rank_probs(&[-1.0, 1.0]), Err(Error::NonPositiveWeight { index: 0, .. })));
    }

    #[test]
    fn pl_offline_examples() {
        let v = vocab(4);
        let p = cat(&v, vec![0.1, 0.9, -0.3, 0.0]);
        let same = ReferenceSnapshot::freeze(&p);
        let cfg = LossConfig::default();
        let rec = PreferenceRecord::ranked(Condition(0), vec![v.motion(2), v.motion(0), v.motion(3)]).unwrap();
        assert_abs_diff_eq!(pl_offline_loss(&p, &same, &rec, &cfg).unwrap(), 6f64.ln(), epsilon = 1e-14);
        let no_group = PreferenceRecord::new(Condition(0), v.motion(0));
        assert!(matches!(pl_offline_loss(&p, &same, &no_group, &cfg), Err(Error::MissingGroup)));
        assert!(PreferenceRecord::ranked(Condition(0), vec![v.motion(1), v.motion(1)]).is_err());
    }

    #[test]
    fn pl_offline_matches_direct_transcription() {
        let v = vocab(5);
        let theta = cat(&v, vec![0.5, -1.2, 0.3, 2.0, -0.1]);
        let reference = ReferenceSnapshot::freeze(&cat(&v, vec![-0.2, 0.4, 0.0, 0.7, 1.1]));
        let cfg = LossConfig { beta: 0.7, ..LossConfig::default() };
        let group: Vec<Motion> = [3, 0, 4, 1].iter().map(|&i| v.motion(i)).collect();
        let h: Vec<f64> = group.iter().map(|m| log_ratio(&theta, &reference, m, Condition(0)).unwrap()).collect();
        let rec = PreferenceRecord::ranked(Condition(0), group).unwrap();
        assert_abs_diff_eq!(pl_offline_loss(&theta, &reference, &rec, &cfg).unwrap(), pl_reference(&h, 0.7), epsilon = 1e-12);
    }

    #[test]
    fn online_examples() {
        let v = vocab(3);
        let p = cat(&v, vec![0.0, 0.0, 0.0]);
        let same = ReferenceSnapshot::freeze(&p);
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let flat = RewardModel::table(vec![vec![0.5, 0.5, 0.5]]).unwrap();
        let l = online_dpo_loss(&p, &same, &flat, &[v.motion(0), v.motion(1)], Condition(0), &cfg).unwrap();
        assert_abs_diff_eq!(l, 0.5 * LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.3466, epsilon = 1e-4);
        assert!(online_dpo_loss(&p, &same, &flat, &[v.motion(0)], Condition(0), &cfg).is_err());

        // K = 3, uniform targets: sum_k (1/(K-k+1)) log(K-k+1)
        let cfg3 = LossConfig { k: 3, ..cfg };
        let l3 = online_dpo_loss(&p, &same, &flat, &v.motions(), Condition(0), &cfg3).unwrap();
        assert_abs_diff_eq!(l3, 3f64.ln() / 3.0 + 2f64.ln() / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn online_one_hot_limit_recovers_top_term() {
        let v = vocab(3);
        let theta = cat(&v, vec![0.4, -0.5, 0.2]);
        let reference = ReferenceSnapshot::freeze(&cat(&v, vec![0.0, 0.1, -0.3]));
        let cands = [v.motion(0), v.motion(1)];
        let h: Vec<f64> = cands.iter().map(|m| log_ratio(&theta, &reference, m, Condition(0)).unwrap()).collect();
        // a huge reward gap puts all of p_r(rank 1) on the second candidate
        let rewards = [0.0, 700.0];
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let l = online_dpo_scored(&theta, &reference, &cands, &rewards, Condition(0), &cfg).unwrap().value;
        let top = -(h[1] - log_sum_exp(&h));
        assert_abs_diff_eq!(l, top, epsilon = 1e-12);
    }

    #[test]
    fn min_similarity_and_weight_examples() {
        let p = |v: Vec<f64>| Motion::point(v).unwrap();
        let w = p(vec![1.0, 0.0]);
        assert_eq!(min_similarity(&w, &[w.clone(), p(vec![0.0, 2.0])]).unwrap(), 0.0);
        assert_abs_diff_eq!(min_similarity(&w, std::slice::from_ref(&w)).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(min_similarity(&w, &[p(vec![0.0, 1.0]), p(vec![-1.0, 0.0])]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(min_similarity(&w, &[]), Err(Error::EmptyCandidates)));

        let cfg = LossConfig::default();
        assert_eq!(win_weight(1.0, &cfg), 1.0);
        assert_eq!(win_weight(-1.0, &cfg), 3.0);
        assert_eq!(win_weight(1.0, &LossConfig { c_const: 1.0, ..cfg }), 0.0);
    }

    fn semi_fixture() -> (Arc<Vocabulary>, Policy, ReferenceSnapshot) {
        let v = vocab(4);
        let theta = cat(&v, vec![0.3, -0.8, 1.1, 0.2]);
        let reference = ReferenceSnapshot::freeze(&cat(&v, vec![0.0, 0.4, 0.5, -0.6]));
        (v, theta, reference)
    }

    #[test]
    fn semi_online_examples() {
        let (v, theta, reference) = semi_fixture();
        let cfg = LossConfig::default();
        let c = Condition(0);
        let rec = PreferenceRecord::new(c, v.motion(2));

        // winner equal to the selected loser
        let low = RewardModel::table(vec![vec![0.9, 0.8, 0.1, 0.7]]).unwrap();
        let l = dsopo_loss(&theta, &reference, &low, &rec, &[v.motion(0), v.motion(2)], c, &cfg).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);

        // a single candidate is the loser regardless of reward
        let h_w = log_ratio(&theta, &reference, &v.motion(2), c).unwrap();
        let h_3 = log_ratio(&theta, &reference, &v.motion(3), c).unwrap();
        let l = dsopo_loss(&theta, &reference, &low, &rec, &[v.motion(3)], c, &cfg).unwrap();
        assert_abs_diff_eq!(l, neg_log_sigmoid(h_w - h_3), epsilon = 1e-15);
        assert!(matches!(dsopo_loss(&theta, &reference, &low, &rec, &[], c, &cfg), Err(Error::EmptyCandidates)));

        // min reward below tau: unified equals direct
        let cands = [v.motion(0), v.motion(1), v.motion(3)];
        let mixed = RewardModel::table(vec![vec![0.9, 0.2, 0.95, 0.7]]).unwrap();
        let d = dsopo_loss(&theta, &reference, &mixed, &rec, &cands, c, &cfg).unwrap();
        let u = usopo_loss(&theta, &reference, &mixed, &rec, &cands, c, &cfg).unwrap();
        assert_eq!(d, u);

        // everything above tau: winner-only term
        let high = RewardModel::table(vec![vec![0.9, 0.6, 0.95, 0.7]]).unwrap();
        let u = usopo_loss(&theta, &reference, &high, &rec, &cands, c, &cfg).unwrap();
        assert_abs_diff_eq!(u, neg_log_sigmoid(h_w), epsilon = 1e-15);
        let same = ReferenceSnapshot::freeze(&theta);
        assert_abs_diff_eq!(usopo_loss(&theta, &same, &high, &rec, &cands, c, &cfg).unwrap(), LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(sopo_loss(&theta, &same, &high, &rec, &cands, c, &cfg).unwrap(), LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(sopo_loss(&theta, &same, &mixed, &rec, &cands, c, &cfg).unwrap(), LN_2, epsilon = 1e-15);
    }

    #[test]
    fn sopo_reweighting_against_hand_expansion() {
        // winner anti-parallel to every candidate: S = -1, beta_w = 3
        let v = Arc::new(Vocabulary::from_embeddings(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![-2.0, 0.0]]).unwrap());
        let theta = cat(&v, vec![0.7, -0.2, 0.1]);
        let reference = ReferenceSnapshot::freeze(&cat(&v, vec![0.0, 0.3, -0.4]));
        let c = Condition(0);
        let cfg = LossConfig::default();
        let rec = PreferenceRecord::new(c, v.motion(0));
        let cands = [v.motion(1), v.motion(2)];
        let rewards = RewardModel::table(vec![vec![0.9, 0.1, 0.3]]).unwrap();
        let h_w = log_ratio(&theta, &reference, &v.motion(0), c).unwrap();
        let h_l = log_ratio(&theta, &reference, &v.motion(1), c).unwrap();
        let s = sopo_loss(&theta, &reference, &rewards, &rec, &cands, c, &cfg).unwrap();
        assert_abs_diff_eq!(s, -sigmoid(3.0 * h_w - h_l).ln(), epsilon = 1e-14);
        let u = usopo_loss(&theta, &reference, &rewards, &rec, &cands, c, &cfg).unwrap();
        assert_abs_diff_eq!(u, -sigmoid(h_w - h_l).ln(), epsilon = 1e-14);

        // S = C - 1 makes beta_w = beta, so sopo == usopo
        let s = sopo_loss(&theta, &reference, &rewards, &rec, &[v.motion(0)], c, &cfg).unwrap();
        let u = usopo_loss(&theta, &reference, &rewards, &rec, &[v.motion(0)], c, &cfg).unwrap();
        assert_eq!(s, u);
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let h = [0.3, -1.2, 0.8, 0.05];
        let w = [0.5, 0.3, 0.15, 0.05];
        let step = 1e-6;
        let kernels: Vec<Box<dyn Fn(&[f64]) -> KernelValue>> = vec![
            Box::new(|h| pairwise_kernel(h[0], h[1], 1.3)),
            Box::new(|h| semi_online_kernel(h[0], Some(h[1]), 2.4, 0.9)),
            Box::new(|h| semi_online_kernel(h[0], None, 2.4, 0.9)),
            Box::new(move |h| ranked_kernel(h, &w, 0.8)),
        ];
        for k in &kernels {
            let base = k(&h);
            for i in 0..base.d_h.len() {
                let mut plus = h;
                let mut minus = h;
                plus[i] += step;
                minus[i] -= step;
                let fd = (k(&plus).value - k(&minus).value) / (2.0 * step);
                assert_abs_diff_eq!(base.d_h[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let (v, theta, reference) = semi_fixture();
        let c = Condition(0);
        let cfg = LossConfig { beta: 0.8, ..LossConfig::default() };
        let rec = PreferenceRecord::ranked(c, vec![v.motion(1), v.motion(3), v.motion(0)]).unwrap();
        let cands = [v.motion(0), v.motion(3), v.motion(2)];
        let rewards = RewardModel::table(vec![vec![0.3, 0.9, 0.6, 0.2]]).unwrap();
        type F<'a> = Box<dyn Fn(&Policy) -> LossGrad + 'a>;
        let cases: Vec<F<'_>> = vec![
            Box::new(|p| dpo_pairwise_loss_grad(p, &reference, &v.motion(1), &v.motion(2), c, &cfg).unwrap()),
            Box::new(|p| pl_offline_loss_grad(p, &reference, &rec, &cfg).unwrap()),
            Box::new(|p| online_dpo_loss_grad(p, &reference, &rewards, &cands, c, &cfg).unwrap()),
            Box::new(|p| dsopo_loss_grad(p, &reference, &rewards, &rec, &cands, c, &cfg).unwrap()),
            Box::new(|p| usopo_loss_grad(p, &reference, &rewards, &rec, &cands, c, &cfg).unwrap()),
            Box::new(|p| sopo_loss_grad(p, &reference, &rewards, &rec, &cands, c, &cfg).unwrap()),
        ];
        for f in &cases {
            let g = f(&theta).grad;
            for i in 0..theta.n_params() {
                let mut plus = theta.params().to_vec();
                let mut minus = plus.clone();
                plus[i] += 1e-6;
                minus[i] -= 1e-6;
                let fd = (f(&theta.with_params(&plus).unwrap()).value - f(&theta.with_params(&minus).unwrap()).value) / 2e-6;
                assert_abs_diff_eq!(g[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ties_break_by_candidate_index() {
        assert_eq!(argmin_reward(&[0.3, 0.1, 0.1]).unwrap(), 1);
        assert_eq!(argmax_reward(&[0.3, 0.9, 0.9]).unwrap(), 1);
        assert_eq!(rank_by_reward(&[0.2, 0.5, 0.2, 0.5]), vec![1, 3, 0, 2]);
    }

    proptest! {
        #[test]
        fn k2_ranked_equals_pairwise(hw in -5.0f64..5.0, hl in -5.0f64..5.0, beta in 0.05f64..4.0) {
            let ranked = ranked_kernel(&[hw, hl], &[1.0, 1.0], beta).value;
            let pair = pairwise_kernel(hw, hl, beta).value;
            prop_assert!((ranked - pair).abs() < 1e-12);
        }

        #[test]
        fn losses_positive_and_monotone(hw in -6.0f64..6.0, hl in -6.0f64..6.0, bw in 0.0f64..3.0, d in 0.01f64..1.0) {
            let base = semi_online_kernel(hw, Some(hl), bw, 1.0).value;
            prop_assert!(base > 0.0 && base.is_finite());
            prop_assert!(semi_online_kernel(hw + d, Some(hl), bw, 1.0).value <= base);
            prop_assert!(semi_online_kernel(hw, Some(hl + d), bw, 1.0).value >= base);
            let w_only = semi_online_kernel(hw, None, bw, 1.0).value;
            prop_assert!(w_only > 0.0 && w_only.is_finite());
        }
    }
}
