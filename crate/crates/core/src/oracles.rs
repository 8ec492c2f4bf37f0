//! Exact-enumeration and finite-difference oracles for finite categorical
//! instances.
//!
//! Everything here is computed from probabilities directly (products of
//! ratios, suffix sums, order statistics) rather than through the log-space
//! kernels in [`crate::losses`], so agreement between the two is a real check.
//!
//! Online objectives take the tuple weights `prod_k pi(x^k|c)` from a
//! *frozen* parameter vector, independent of the parameters being
//! differentiated. [`check_theorem2_unfrozen`] is the negative control that
//! lets the weights move with the parameters.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::enumerate::{self, Tuples};
use crate::error::{Error, Result};
use crate::losses::{self, argmin_reward, rank_by_reward, Branch, LossConfig, PreferenceRecord};
use crate::model::{CategoricalPolicy, Condition, Policy, ReferenceSnapshot, RewardModel, Vocabulary};
use crate::numeric::{compensated_sum, neg_log_sigmoid, CompensatedSum};

pub const MAX_VOCAB: usize = 8;
pub const MAX_CONDITIONS: usize = 4;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default relative tolerance for gradient comparisons.
pub const GRAD_REL_TOL: f64 = 1e-6;
/// Absolute floor below which gradient differences always pass.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// A distribution over ranked groups (item indices, best first).
pub type GroupDistribution = Vec<(Vec<usize>, f64)>;

/// A small categorical problem on which every expectation is enumerable.
#[derive(Debug, Clone)]
pub struct FiniteInstance {
    pub policy: Policy,
    pub reference: ReferenceSnapshot,
    /// Lookup-table reward, `scores[condition][item]`.
    pub reward_model: RewardModel,
    /// One ranked group per condition.
    pub gt_groups: Vec<Vec<usize>>,
    /// Optional general preference distribution per condition; when absent
    /// the one-point distribution on `gt_groups` is used.
    pub gt_distribution: Option<Vec<GroupDistribution>>,
}

fn check_group(group: &[usize], vocab: usize) -> Result<()> {
    for (i, &a) in group.iter().enumerate() {
        if a >= vocab {
            return Err(Error::OutOfSupport(format!("group item {a} outside vocabulary of {vocab}")));
        }
        if group[i + 1..].contains(&a) {
            return Err(Error::InvalidParameter("ground-truth group repeats an item".into()));
        }
    }
    Ok(())
}

impl FiniteInstance {
    pub fn new(
        policy: Policy,
        reference: ReferenceSnapshot,
        reward_model: RewardModel,
        gt_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let inst = Self::new_allowing_ties(policy, reference, reward_model, gt_groups)?;
        for row in inst.rewards_table() {
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidParameter("table rewards must be distinct per condition".into()));
            }
        }
        Ok(inst)
    }

    /// Like [`FiniteInstance::new`] but permits tied rewards, for symmetric
    /// test cases.
    pub fn new_allowing_ties(
        policy: Policy,
        reference: ReferenceSnapshot,
        reward_model: RewardModel,
        gt_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let cat = policy
            .as_categorical()
            .ok_or_else(|| Error::KindMismatch("finite instances need a categorical policy".into()))?;
        if reference.policy().as_categorical().is_none() || reference.policy().n_params() != policy.n_params() {
            return Err(Error::KindMismatch("reference must match the categorical policy".into()));
        }
        let vocab = cat.vocab_size();
        if vocab > MAX_VOCAB || policy.n_conditions() > MAX_CONDITIONS {
            return Err(Error::InvalidParameter(format!(
                "finite instances allow at most {MAX_VOCAB} items and {MAX_CONDITIONS} conditions"
            )));
        }
        let RewardModel::Table(rows) = &reward_model else {
            return Err(Error::KindMismatch("finite instances need a lookup-table reward".into()));
        };
        if rows.len() != policy.n_conditions() || rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::DimensionMismatch { expected: vocab, got: rows.first().map_or(0, Vec::len) });
        }
        if gt_groups.len() != policy.n_conditions() {
            return Err(Error::DimensionMismatch { expected: policy.n_conditions(), got: gt_groups.len() });
        }
        let k = gt_groups[0].len();
        for g in &gt_groups {
            if g.len() != k || k == 0 || k > vocab {
                return Err(Error::InvalidParameter("groups must share a length K with 1 <= K <= vocab".into()));
            }
            check_group(g, vocab)?;
        }
        Ok(Self { policy, reference, reward_model, gt_groups, gt_distribution: None })
    }

    /// Replaces the one-point preference distribution with a general one.
    pub fn with_gt_distribution(mut self, dist: Vec<GroupDistribution>) -> Result<Self> {
        if dist.len() != self.n_conditions() {
            return Err(Error::DimensionMismatch { expected: self.n_conditions(), got: dist.len() });
        }
        for row in &dist {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|(_, p)| !(*p > 0.0)) {
                return Err(Error::InvalidParameter("group probabilities must be positive and sum to 1".into()));
            }
            for (g, _) in row {
                if g.len() != self.k() {
                    return Err(Error::InvalidParameter("group length differs from K".into()));
                }
                check_group(g, self.vocab_size())?;
            }
        }
        self.gt_distribution = Some(dist);
        Ok(self)
    }

    /// Random instance: standard-normal logits for policy and reference,
    /// uniform distinct rewards, random distinct ground-truth groups.
    pub fn random(seed: u64, vocab_size: usize, n_conditions: usize, k: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Arc::new(Vocabulary::random(vocab_size, 3, rng.random())?);
        let n = vocab_size * n_conditions;
        let logits: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ref_logits: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let policy = Policy::Categorical(CategoricalPolicy::new(vocab.clone(), n_conditions, logits)?);
        let reference = ReferenceSnapshot::freeze(&Policy::Categorical(CategoricalPolicy::new(vocab, n_conditions, ref_logits)?));
        let rewards = (0..n_conditions).map(|_| (0..vocab_size).map(|_| rng.random::<f64>()).collect()).collect();
        let groups = (0..n_conditions).map(|_| random_group(&mut rng, vocab_size, k)).collect();
        Self::new(policy, reference, RewardModel::table(rewards)?, groups)
    }

    /// Random instance whose preference distribution spreads over
    /// `n_groups` random ranked groups per condition.
    pub fn random_with_distribution(seed: u64, vocab_size: usize, n_conditions: usize, k: usize, n_groups: usize) -> Result<Self> {
        let inst = Self::random(seed, vocab_size, n_conditions, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD157);
        let dist = (0..n_conditions)
            .map(|_| {
                let raw: Vec<f64> = (0..n_groups).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let mut row: GroupDistribution = raw.iter().map(|w| (random_group(&mut rng, vocab_size, k), w / total)).collect();
                let last = 1.0 - row[..n_groups - 1].iter().map(|(_, p)| p).sum::<f64>();
                row[n_groups - 1].1 = last;
                row
            })
            .collect();
        inst.with_gt_distribution(dist)
    }

    pub fn categorical(&self) -> &CategoricalPolicy {
        self.policy.as_categorical().expect("validated at construction")
    }

    pub fn vocab_size(&self) -> usize {
        self.categorical().vocab_size()
    }

    pub fn n_conditions(&self) -> usize {
        self.policy.n_conditions()
    }

    pub fn k(&self) -> usize {
        self.gt_groups[0].len()
    }

    pub fn rewards_table(&self) -> &Vec<Vec<f64>> {
        match &self.reward_model {
            RewardModel::Table(rows) => rows,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Preference distribution over groups for condition `c`.
    pub fn group_distribution(&self, c: usize) -> GroupDistribution {
        match &self.gt_distribution {
            Some(d) => d[c].clone(),
            None => vec![(self.gt_groups[c].clone(), 1.0)],
        }
    }

    /// Same instance with policy parameters replaced.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.policy = self.policy.with_params(params)?;
        Ok(out)
    }
}

fn random_group<R: Rng>(rng: &mut R, vocab: usize, k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..vocab).collect();
    for i in 0..k.min(vocab) {
        let j = rng.random_range(i..vocab);
        items.swap(i, j);
    }
    items.truncate(k);
    items
}

/// Side-by-side gradients from two routes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub analytic_or_loss_grad: Vec<f64>,
    pub oracle_grad: Vec<f64>,
    pub max_abs_diff: f64,
    pub rel_diff: f64,
    pub passed: bool,
}

impl GradientReport {
    /// Compares two gradients. Passes when the relative difference is below
    /// `rel_tol` or the absolute difference is below `abs_floor`.
    pub fn compare(a: Vec<f64>, b: Vec<f64>, rel_tol: f64, abs_floor: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
        let max_abs_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(&b).map(|v| v.abs()).fold(0.0, f64::max);
        let rel_diff = if max_abs_diff == 0.0 { 0.0 } else { max_abs_diff / scale };
        let passed = rel_diff < rel_tol || max_abs_diff < abs_floor;
        Ok(Self { analytic_or_loss_grad: a, oracle_grad: b, max_abs_diff, rel_diff, passed })
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point)?;
        point[i] = orig - h;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}: {plus} / {minus}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Per-item ratio weights `(pi/pi_ref)^beta` for condition `c`.
fn ratio_weights(inst: &FiniteInstance, c: usize, beta: f64) -> Result<Vec<f64>> {
    let p = inst.categorical().probs(Condition(c))?;
    let q = inst.reference.policy().as_categorical().expect("categorical").probs(Condition(c))?;
    Ok(p.iter().zip(&q).map(|(a, b)| (a / b).powf(beta)).collect())
}

/// `p_theta(group)` as a product of suffix-normalised ratio weights.
fn group_likelihood(weights: &[f64], group: &[usize]) -> f64 {
    (0..group.len())
        .map(|k| weights[group[k]] / group[k..].iter().map(|&j| weights[j]).sum::<f64>())
        .product()
}

/// Mean over conditions of `-sum_g p_gt(g) log p_theta(g)`.
pub fn exact_offline_objective(inst: &FiniteInstance, cfg: &LossConfig) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for c in 0..inst.n_conditions() {
        let w = ratio_weights(inst, c, cfg.beta)?;
        for (g, p) in inst.group_distribution(c) {
            acc.add(-p * group_likelihood(&w, &g).ln());
        }
    }
    Ok(acc.value() / inst.n_conditions() as f64)
}

/// Mean over conditions of `KL(p_gt || p_theta)` on the group event space.
pub fn exact_kl_offline(inst: &FiniteInstance, cfg: &LossConfig) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for c in 0..inst.n_conditions() {
        let w = ratio_weights(inst, c, cfg.beta)?;
        for (g, p) in inst.group_distribution(c) {
            acc.add(p * (p.ln() - group_likelihood(&w, &g).ln()));
        }
    }
    Ok(acc.value() / inst.n_conditions() as f64)
}

/// Finite-difference gradients of the offline objective and of the forward
/// KL to the preference distribution, compared.
pub fn check_theorem1(inst: &FiniteInstance, cfg: &LossConfig, h: f64, tol: f64) -> Result<GradientReport> {
    let params = inst.policy.params().to_vec();
    let loss = finite_diff_grad(|p| exact_offline_objective(&inst.with_params(p)?, cfg), &params, h)?;
    let kl = finite_diff_grad(|p| exact_kl_offline(&inst.with_params(p)?, cfg), &params, h)?;
    GradientReport::compare(loss, kl, tol, GRAD_ABS_FLOOR)
}

/// Rank targets and policy rank probabilities for one tuple, best-first.
struct RankedTuple {
    p_r: Vec<f64>,
    p_theta: Vec<f64>,
}

fn ranked_tuple(tuple: &[usize], rewards: &[f64], weights: &[f64]) -> RankedTuple {
    let tuple_rewards: Vec<f64> = tuple.iter().map(|&i| rewards[i]).collect();
    let order: Vec<usize> = rank_by_reward(&tuple_rewards).into_iter().map(|i| tuple[i]).collect();
    let er: Vec<f64> = order.iter().map(|&i| rewards[i].exp()).collect();
    let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let k = order.len();
    let p_r = (0..k).map(|j| er[j] / er[j..].iter().sum::<f64>()).collect();
    let p_theta = (0..k).map(|j| w[j] / w[j..].iter().sum::<f64>()).collect();
    RankedTuple { p_r, p_theta }
}

/// Enumerates tuples for every condition; tuple weights come from `frozen`.
fn online_sum<F>(inst: &FiniteInstance, frozen: &Policy, cfg: &LossConfig, mut term: F) -> Result<f64>
where
    F: FnMut(&RankedTuple) -> f64,
{
    let sampler = frozen
        .as_categorical()
        .ok_or_else(|| Error::KindMismatch("frozen sampler must be categorical".into()))?;
    let mut acc = CompensatedSum::new();
    for c in 0..inst.n_conditions() {
        let pbar = sampler.probs(Condition(c))?;
        let weights = ratio_weights(inst, c, cfg.beta)?;
        let rewards = &inst.rewards_table()[c];
        acc.add(enumerate::expectation(&pbar, cfg.k, |tuple| Ok(term(&ranked_tuple(tuple, rewards, &weights))))?);
    }
    Ok(acc.value() / inst.n_conditions() as f64)
}

/// Online objective `sum_tuples pbar(tuple) [-sum_k p_r log p_theta]` with
/// `pbar` taken from `frozen`.
pub fn online_objective_frozen(inst: &FiniteInstance, frozen: &Policy, cfg: &LossConfig) -> Result<f64> {
    online_sum(inst, frozen, cfg, |t| -compensated_sum(t.p_r.iter().zip(&t.p_theta).map(|(r, q)| r * q.ln())))
}

/// `sum_tuples pbar(tuple) KL(p_r || p_theta)` with `pbar` from `frozen`.
pub fn weighted_kl_online_frozen(inst: &FiniteInstance, frozen: &Policy, cfg: &LossConfig) -> Result<f64> {
    online_sum(inst, frozen, cfg, |t| compensated_sum(t.p_r.iter().zip(&t.p_theta).map(|(r, q)| r * (r / q).ln())))
}

/// `sum_tuples pbar(tuple) H(p_r)`, the parameter-free gap between the two
/// online objectives.
pub fn weighted_rank_entropy(inst: &FiniteInstance, frozen: &Policy, cfg: &LossConfig) -> Result<f64> {
    online_sum(inst, frozen, cfg, |t| -compensated_sum(t.p_r.iter().map(|r| r * r.ln())))
}

/// Exact online DPO objective at the instance's current parameters.
pub fn exact_online_objective(inst: &FiniteInstance, cfg: &LossConfig) -> Result<f64> {
    online_objective_frozen(inst, &inst.policy, cfg)
}

/// Exact reward-weighted KL objective at the instance's current parameters.
pub fn exact_weighted_kl_online(inst: &FiniteInstance, cfg: &LossConfig) -> Result<f64> {
    weighted_kl_online_frozen(inst, &inst.policy, cfg)
}

/// Finite-difference gradients of the two online objectives with the tuple
/// weights frozen at the current parameters.
pub fn check_theorem2(inst: &FiniteInstance, cfg: &LossConfig, h: f64, tol: f64) -> Result<GradientReport> {
    let params = inst.policy.params().to_vec();
    let frozen = inst.policy.clone();
    let loss = finite_diff_grad(|p| online_objective_frozen(&inst.with_params(p)?, &frozen, cfg), &params, h)?;
    let kl = finite_diff_grad(|p| weighted_kl_online_frozen(&inst.with_params(p)?, &frozen, cfg), &params, h)?;
    GradientReport::compare(loss, kl, tol, GRAD_ABS_FLOOR)
}

/// Negative control: the online loss gradient (weights frozen) against the
/// gradient of the weighted KL with the tuple weights differentiated too.
/// Generally these disagree by the gradient of the weighted rank entropy.
pub fn check_theorem2_unfrozen(inst: &FiniteInstance, cfg: &LossConfig, h: f64, tol: f64) -> Result<GradientReport> {
    let params = inst.policy.params().to_vec();
    let frozen = inst.policy.clone();
    let loss = finite_diff_grad(|p| online_objective_frozen(&inst.with_params(p)?, &frozen, cfg), &params, h)?;
    let kl = finite_diff_grad(
        |p| {
            let moved = inst.with_params(p)?;
            weighted_kl_online_frozen(&moved, &moved.policy, cfg)
        },
        &params,
        h,
    )?;
    GradientReport::compare(loss, kl, tol, GRAD_ABS_FLOOR)
}

/// Policy whose condition-0 probabilities put exactly `eps_prob` on `item`,
/// keeping the relative odds of the other items.
pub fn with_item_probability(inst: &FiniteInstance, item: usize, eps_prob: f64) -> Result<FiniteInstance> {
    if item >= inst.vocab_size() || !(0.0..1.0).contains(&eps_prob) {
        return Err(Error::InvalidParameter(format!("need item < vocab and eps in [0, 1), got {item}, {eps_prob}")));
    }
    let mut probs: Vec<Vec<f64>> =
        (0..inst.n_conditions()).map(|c| inst.categorical().probs(Condition(c))).collect::<Result<_>>()?;
    let rest: f64 = probs[0].iter().enumerate().filter(|(i, _)| *i != item).map(|(_, p)| p).sum();
    for (i, p) in probs[0].iter_mut().enumerate() {
        *p = if i == item { eps_prob } else { *p / rest * (1.0 - eps_prob) };
    }
    let mut out = inst.clone();
    out.policy = Policy::Categorical(CategoricalPolicy::from_probabilities(inst.categorical().vocab().clone(), &probs)?);
    Ok(out)
}

/// Gradient norm contributed by all condition-0 tuples containing `item`
/// when that item has policy probability `eps_prob` (frozen tuple weights).
/// Exactly zero when the item has no mass.
pub fn check_vanishing_gradient(inst: &FiniteInstance, cfg: &LossConfig, item: usize, eps_prob: f64) -> Result<f64> {
    if eps_prob == 0.0 {
        return Ok(0.0);
    }
    let inst = with_item_probability(inst, item, eps_prob)?;
    let frozen = inst.categorical().probs(Condition(0))?;
    let rewards = inst.rewards_table()[0].clone();
    let restricted = |params: &[f64]| -> Result<f64> {
        let moved = inst.with_params(params)?;
        let weights = ratio_weights(&moved, 0, cfg.beta)?;
        let mut acc = CompensatedSum::new();
        for tuple in Tuples::new(frozen.len(), cfg.k)? {
            if !tuple.contains(&item) {
                continue;
            }
            let pbar: f64 = tuple.iter().map(|&i| frozen[i]).product();
            let t = ranked_tuple(&tuple, &rewards, &weights);
            acc.add(-pbar * compensated_sum(t.p_r.iter().zip(&t.p_theta).map(|(r, q)| r * q.ln())));
        }
        Ok(acc.value())
    };
    let grad = finite_diff_grad(restricted, inst.policy.params(), FD_STEP)?;
    Ok(grad.iter().map(|g| g * g).sum::<f64>().sqrt())
}

/// Probability that each item is the selected (lowest-reward) candidate among
/// `k` i.i.d. draws, by order statistics. Requires distinct rewards.
pub fn loser_distribution(probs: &[f64], rewards: &[f64], k: usize) -> Vec<f64> {
    (0..probs.len())
        .map(|v| {
            let at_least: f64 = (0..probs.len()).filter(|&u| rewards[u] >= rewards[v]).map(|u| probs[u]).sum();
            let above: f64 = (0..probs.len()).filter(|&u| rewards[u] > rewards[v]).map(|u| probs[u]).sum();
            at_least.powi(k as i32) - above.powi(k as i32)
        })
        .collect()
}

/// Closed-form branch probabilities `(Z_vu, Z_hu)`.
pub fn branch_probabilities(probs: &[f64], rewards: &[f64], k: usize, tau: f64) -> (f64, f64) {
    let high: f64 = probs.iter().zip(rewards).filter(|(_, r)| **r >= tau).fold(0.0, |acc, (p, _)| acc + p);
    let z_hu = high.powi(k as i32);
    (1.0 - z_hu, z_hu)
}

/// Branch probabilities by enumerating every tuple.
pub fn branch_probabilities_enumerated(probs: &[f64], rewards: &[f64], k: usize, tau: f64) -> Result<(f64, f64)> {
    let mut vu = CompensatedSum::new();
    let mut hu = CompensatedSum::new();
    for tuple in Tuples::new(probs.len(), k)? {
        let w: f64 = tuple.iter().map(|&i| probs[i]).product();
        let r: Vec<f64> = tuple.iter().map(|&i| rewards[i]).collect();
        match Branch::from_reward(r[argmin_reward(&r)?], tau) {
            Branch::ValuableUnpreferred => vu.add(w),
            Branch::HighPreferenceUnpreferred => hu.add(w),
        }
    }
    Ok((vu.value(), hu.value()))
}

/// The direct semi-online loss expected two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitReport {
    /// Tuple-enumerated expectation of the direct loss.
    pub tuple_expectation: f64,
    pub l_vu: f64,
    pub l_hu: f64,
    pub z_vu: f64,
    pub z_hu: f64,
}

impl SplitReport {
    pub fn residual(&self) -> f64 {
        (self.tuple_expectation - (self.l_vu + self.l_hu)).abs()
    }
}

fn pair_term(inst: &FiniteInstance, c: Condition, winner: &crate::model::Motion, loser: usize, beta: f64) -> Result<f64> {
    let v = inst.categorical().vocab();
    let h_w = crate::model::log_ratio(&inst.policy, &inst.reference, winner, c)?;
    let h_l = crate::model::log_ratio(&inst.policy, &inst.reference, &v.motion(loser), c)?;
    Ok(neg_log_sigmoid(beta * (h_w - h_l)))
}

/// Direct loss expectation by tuple enumeration against the sum of the
/// valuable and high-preference parts computed from the loser's order
/// statistics.
pub fn split_identity(inst: &FiniteInstance, record: &PreferenceRecord, cfg: &LossConfig) -> Result<SplitReport> {
    let c = record.condition;
    let probs = inst.categorical().probs(c)?;
    let rewards = &inst.rewards_table()[c.0];
    let tuple_expectation = losses::exact::dsopo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, record, cfg)?;
    let loser = loser_distribution(&probs, rewards, cfg.k);
    let mut l_vu = CompensatedSum::new();
    let mut l_hu = CompensatedSum::new();
    for (v, pv) in loser.iter().enumerate() {
        if *pv == 0.0 {
            continue;
        }
        let term = pv * pair_term(inst, c, &record.winner, v, cfg.beta)?;
        if rewards[v] < cfg.tau {
            l_vu.add(term);
        } else {
            l_hu.add(term);
        }
    }
    let (z_vu, z_hu) = branch_probabilities(&probs, rewards, cfg.k, cfg.tau);
    Ok(SplitReport { tuple_expectation, l_vu: l_vu.value(), l_hu: l_hu.value(), z_vu, z_hu })
}

/// Branch-form expectations against their partition-weighted split forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalentFormReport {
    pub usopo_branch: f64,
    pub usopo_split: f64,
    pub sopo_branch: f64,
    pub sopo_split: f64,
    pub z_vu: f64,
    pub z_hu: f64,
    /// `Z_vu + Z_hu` from tuple enumeration.
    pub z_total_enumerated: f64,
}

impl EquivalentFormReport {
    pub fn residual(&self) -> f64 {
        (self.usopo_branch - self.usopo_split).abs().max((self.sopo_branch - self.sopo_split).abs())
    }
}

pub fn equivalent_form(inst: &FiniteInstance, record: &PreferenceRecord, cfg: &LossConfig) -> Result<EquivalentFormReport> {
    let c = record.condition;
    let probs = inst.categorical().probs(c)?;
    let rewards = inst.rewards_table()[c.0].clone();
    let (z_vu, z_hu) = branch_probabilities(&probs, &rewards, cfg.k, cfg.tau);
    let (e_vu, e_hu) = branch_probabilities_enumerated(&probs, &rewards, cfg.k, cfg.tau)?;

    let usopo_branch = losses::exact::usopo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, record, cfg)?;
    let sopo_branch = losses::exact::sopo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, record, cfg)?;

    // unified split: Z_hu * winner-only + valuable part from the loser distribution
    let h_w = crate::model::log_ratio(&inst.policy, &inst.reference, &record.winner, c)?;
    let loser = loser_distribution(&probs, &rewards, cfg.k);
    let mut l_vu = CompensatedSum::new();
    for (v, pv) in loser.iter().enumerate() {
        if rewards[v] < cfg.tau && *pv > 0.0 {
            l_vu.add(pv * pair_term(inst, c, &record.winner, v, cfg.beta)?);
        }
    }
    let usopo_split = z_hu * neg_log_sigmoid(cfg.beta * h_w) + l_vu.value();

    // reweighted split: Z times the conditional expectation inside each branch
    let vocab = inst.categorical().vocab();
    let mut vu_mass = CompensatedSum::new();
    let mut hu_mass = CompensatedSum::new();
    let mut vu_sum = CompensatedSum::new();
    let mut hu_sum = CompensatedSum::new();
    for tuple in Tuples::new(probs.len(), cfg.k)? {
        let w: f64 = tuple.iter().map(|&i| probs[i]).product();
        if w == 0.0 {
            continue;
        }
        let cands: Vec<_> = tuple.iter().map(|&i| vocab.motion(i)).collect();
        let r: Vec<f64> = tuple.iter().map(|&i| rewards[i]).collect();
        let l = tuple[argmin_reward(&r)?];
        let s = losses::min_similarity(&record.winner, &cands)?;
        let beta_w = losses::win_weight(s, cfg);
        if rewards[l] < cfg.tau {
            let h_l = crate::model::log_ratio(&inst.policy, &inst.reference, &vocab.motion(l), c)?;
            vu_mass.add(w);
            vu_sum.add(w * neg_log_sigmoid(beta_w * h_w - cfg.beta * h_l));
        } else {
            hu_mass.add(w);
            hu_sum.add(w * neg_log_sigmoid(beta_w * h_w));
        }
    }
    let conditional = |sum: CompensatedSum, mass: CompensatedSum| if mass.value() > 0.0 { sum.value() / mass.value() } else { 0.0 };
    let sopo_split = z_vu * conditional(vu_sum, vu_mass) + z_hu * conditional(hu_sum, hu_mass);

    Ok(EquivalentFormReport {
        usopo_branch,
        usopo_split,
        sopo_branch,
        sopo_split,
        z_vu,
        z_hu,
        z_total_enumerated: e_vu + e_hu,
    })
}

/// Random instance satisfying `pi_theta(x) <= pi_ref(x)` on every item whose
/// reward is at least `tau` (the only losers the high-preference branch can
/// select). The freed mass moves onto items below `tau`.
pub fn random_bound_instance(seed: u64, cfg: &LossConfig) -> Result<(FiniteInstance, PreferenceRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = rng.random_range(3..=6);
    let vocab = Arc::new(Vocabulary::random(vocab_size, 3, rng.random())?);
    let mut rewards: Vec<f64> = (0..vocab_size).map(|_| rng.random::<f64>()).collect();
    // at least one item on each side of tau
    rewards[0] = cfg.tau * rng.random::<f64>();
    rewards[1] = cfg.tau + (1.0 - cfg.tau) * rng.random::<f64>();
    let ref_logits: Vec<f64> = (0..vocab_size).map(|_| rng.sample(StandardNormal)).collect();
    let reference = Policy::Categorical(CategoricalPolicy::new(vocab.clone(), 1, ref_logits)?);
    let q = reference.as_categorical().unwrap().probs(Condition(0))?;
    let mut p = q.clone();
    let mut freed = 0.0;
    for i in 0..vocab_size {
        if rewards[i] >= cfg.tau {
            let shrink: f64 = rng.random_range(0.05..1.0);
            p[i] = q[i] * shrink;
            freed += q[i] - p[i];
        }
    }
    let low: Vec<usize> = (0..vocab_size).filter(|&i| rewards[i] < cfg.tau).collect();
    let shares: Vec<f64> = low.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = shares.iter().sum();
    for (i, s) in low.iter().zip(&shares) {
        p[*i] += freed * s / total;
    }
    let policy = Policy::Categorical(CategoricalPolicy::from_probabilities(vocab.clone(), &[p])?);
    let winner = rng.random_range(0..vocab_size);
    let inst = FiniteInstance::new(
        policy,
        ReferenceSnapshot::freeze(&reference),
        RewardModel::table(vec![rewards])?,
        vec![vec![winner]],
    )?;
    Ok((inst, PreferenceRecord::new(Condition(0), vocab.motion(winner))))
}

/// Result of the direct/unified ordering sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub trials: usize,
    pub passes: usize,
    pub strict: usize,
    /// Largest `E[direct] - E[unified]` seen (should be <= 0).
    pub worst_gap: f64,
}

/// Slack allowed for rounding when checking `E[direct] <= E[unified]`.
pub const BOUND_SLACK: f64 = 1e-12;

/// Exact `(E[direct], E[unified])` for one instance.
pub fn bound_pair(inst: &FiniteInstance, record: &PreferenceRecord, cfg: &LossConfig) -> Result<(f64, f64)> {
    let d = losses::exact::dsopo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, record, cfg)?;
    let u = losses::exact::usopo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, record, cfg)?;
    Ok((d, u))
}

/// Runs `n_trials` seeded instances from [`random_bound_instance`].
pub fn check_dsopo_usopo_bound(n_trials: usize, seed: u64, cfg: &LossConfig) -> Result<BoundReport> {
    let mut report = BoundReport { trials: n_trials, passes: 0, strict: 0, worst_gap: f64::NEG_INFINITY };
    for trial in 0..n_trials {
        let (inst, record) = random_bound_instance(seed.wrapping_add(trial as u64), cfg)?;
        let (d, u) = bound_pair(&inst, &record, cfg)?;
        let gap = d - u;
        report.worst_gap = report.worst_gap.max(gap);
        if gap <= BOUND_SLACK {
            report.passes += 1;
        }
        if gap < 0.0 {
            report.strict += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_instance(vocab: usize, k: usize, rewards: Vec<f64>) -> FiniteInstance {
        let v = Arc::new(Vocabulary::random(vocab, 3, 1).unwrap());
        let p = Policy::Categorical(CategoricalPolicy::uniform(v, 1).unwrap());
        let group = (0..k).collect();
        FiniteInstance::new_allowing_ties(p.clone(), ReferenceSnapshot::freeze(&p), RewardModel::table(vec![rewards]).unwrap(), vec![group])
            .unwrap()
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0] + p[1] * p[1]), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 100.0 * 1e-10 && (g[1] - 4.0).abs() < 100.0 * 1e-10);
        let g = finite_diff_grad(|_| Ok(3.0), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|p| Ok(-neg_log_sigmoid(p[0])), &[0.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-8);
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &[0.0], 1e-5).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }

    #[test]
    fn fd_error_within_budget_on_a_cubic() {
        // f = sum x^3: exact derivative 3x^2, central-difference error h^2 x... = h^2
        let h = 1e-3;
        let x = [0.5, -1.5, 2.0];
        let g = finite_diff_grad(|p| Ok(p.iter().map(|v| v * v * v).sum()), &x, h).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 3.0 * xi * xi).abs() <= 100.0 * h * h);
        }
    }

    #[test]
    fn offline_objective_examples() {
        let cfg = LossConfig::default();
        let inst = uniform_instance(4, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_abs_diff_eq!(exact_offline_objective(&inst, &cfg).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let inst3 = uniform_instance(4, 3, vec![0.1, 0.2, 0.3, 0.4]);
        assert_abs_diff_eq!(exact_offline_objective(&inst3, &cfg).unwrap(), 6f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn offline_objective_matches_loss_module() {
        let cfg = LossConfig { beta: 0.6, ..LossConfig::default() };
        let inst = FiniteInstance::random(5, 5, 3, 3).unwrap();
        let v = inst.categorical().vocab().clone();
        let mean = (0..3)
            .map(|c| {
                let group = inst.gt_groups[c].iter().map(|&i| v.motion(i)).collect();
                let rec = PreferenceRecord::ranked(Condition(c), group).unwrap();
                losses::pl_offline_loss(&inst.policy, &inst.reference, &rec, &cfg).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(exact_offline_objective(&inst, &cfg).unwrap(), mean, epsilon = 1e-12);
    }

    #[test]
    fn kl_offline_examples() {
        let cfg = LossConfig::default();
        let inst = FiniteInstance::random(9, 5, 2, 3).unwrap();
        // one-point preference distribution: KL equals the offline objective
        assert_eq!(exact_kl_offline(&inst, &cfg).unwrap(), exact_offline_objective(&inst, &cfg).unwrap());

        // p_gt equal to p_theta on the two orderings of a pair: KL = 0
        let single = FiniteInstance::random(3, 4, 1, 2).unwrap();
        let w = ratio_weights(&single, 0, cfg.beta).unwrap();
        let (a, b) = (0usize, 2usize);
        let pa = w[a] / (w[a] + w[b]);
        let matched = single.clone().with_gt_distribution(vec![vec![(vec![a, b], pa), (vec![b, a], 1.0 - pa)]]).unwrap();
        assert_abs_diff_eq!(exact_kl_offline(&matched, &cfg).unwrap(), 0.0, epsilon = 1e-15);

        // generic two-group distribution: hand-computed sum p log(p / q)
        let generic = single.with_gt_distribution(vec![vec![(vec![a, b], 0.3), (vec![1, 3], 0.7)]]).unwrap();
        let q1 = pa;
        let q2 = w[1] / (w[1] + w[3]);
        let hand = 0.3 * (0.3f64 / q1).ln() + 0.7 * (0.7f64 / q2).ln();
        assert_abs_diff_eq!(exact_kl_offline(&generic, &cfg).unwrap(), hand, epsilon = 1e-14);
    }

    #[test]
    fn theorem1_examples() {
        let cfg = LossConfig { k: 3, ..LossConfig::default() };
        let inst = FiniteInstance::random(21, 5, 2, 3).unwrap();
        let r = check_theorem1(&inst, &cfg, FD_STEP, GRAD_REL_TOL).unwrap();
        assert!(r.passed && r.max_abs_diff == 0.0);

        // generic preference distribution over all orderings of three items
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let probs = [0.3, 0.05, 0.2, 0.1, 0.25, 0.1];
        for shift in 0..3 {
            let row: GroupDistribution = perms
                .iter()
                .zip(probs)
                .map(|(p, q)| (p.iter().map(|i| i + shift).collect(), q))
                .collect();
            let generic = inst.clone().with_gt_distribution(vec![row.clone(), row]).unwrap();
            let r = check_theorem1(&generic, &cfg, FD_STEP, GRAD_REL_TOL).unwrap();
            assert!(r.passed, "rel {}", r.rel_diff);
            assert!(r.rel_diff < 1e-6);
        }
    }

    #[test]
    fn online_objective_four_tuple_hand_expansion() {
        // vocab 2, K = 2, beta = 1, one condition
        let v = Arc::new(Vocabulary::random(2, 2, 4).unwrap());
        let theta = Policy::Categorical(CategoricalPolicy::from_probabilities(v.clone(), &[vec![0.7, 0.3]]).unwrap());
        let reference = Policy::Categorical(CategoricalPolicy::from_probabilities(v, &[vec![0.4, 0.6]]).unwrap());
        let inst = FiniteInstance::new(theta, ReferenceSnapshot::freeze(&reference), RewardModel::table(vec![vec![0.9, 0.2]]).unwrap(), vec![vec![0]])
            .unwrap();
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let (w0, w1): (f64, f64) = (0.7 / 0.4, 0.3 / 0.6);
        let pr = 0.9f64.exp() / (0.9f64.exp() + 0.2f64.exp());
        // (0,0) and (1,1): equal weights, p_r(1) = 1/2
        let same = 0.5 * 2f64.ln();
        // (0,1) and (1,0): item 0 ranked first
        let mixed = -pr * (w0 / (w0 + w1)).ln();
        let hand = 0.49 * same + 0.21 * mixed + 0.21 * mixed + 0.09 * same;
        assert_abs_diff_eq!(exact_online_objective(&inst, &cfg).unwrap(), hand, epsilon = 1e-15);
        // the loss module's exact mode agrees
        let exact = losses::exact::online_dpo(&inst.policy, &inst.policy, &inst.reference, &inst.reward_model, Condition(0), &cfg).unwrap();
        assert_abs_diff_eq!(exact, hand, epsilon = 1e-14);
    }

    #[test]
    fn online_objective_closed_form_at_reference() {
        // theta == ref, equal rewards: every tuple contributes sum_k (1/(K-k+1)) log(K-k+1)
        let cfg = LossConfig { k: 3, ..LossConfig::default() };
        let inst = uniform_instance(3, 1, vec![0.5, 0.5, 0.5]);
        let expected = 3f64.ln() / 3.0 + 2f64.ln() / 2.0;
        assert_abs_diff_eq!(exact_online_objective(&inst, &cfg).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn entropy_gap_between_online_objectives() {
        let cfg = LossConfig { k: 3, beta: 1.3, ..LossConfig::default() };
        let inst = FiniteInstance::random(33, 4, 2, 2).unwrap();
        let gap = exact_online_objective(&inst, &cfg).unwrap() - exact_weighted_kl_online(&inst, &cfg).unwrap();
        let entropy = weighted_rank_entropy(&inst, &inst.policy, &cfg).unwrap();
        assert_abs_diff_eq!(gap, entropy, epsilon = 1e-10);
        // frozen weights: the gap does not move with the parameters
        let moved = inst.with_params(&inst.policy.params().iter().map(|p| p * 0.3 + 0.1).collect::<Vec<_>>()).unwrap();
        let gap2 = online_objective_frozen(&moved, &inst.policy, &cfg).unwrap() - weighted_kl_online_frozen(&moved, &inst.policy, &cfg).unwrap();
        assert_abs_diff_eq!(gap, gap2, epsilon = 1e-12);
    }

    #[test]
    fn theorem2_examples() {
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let inst = FiniteInstance::random(2, 3, 1, 2).unwrap();
        let r = check_theorem2(&inst, &cfg, FD_STEP, GRAD_REL_TOL).unwrap();
        assert!(r.passed, "{r:?}");

        let sym = uniform_instance(3, 1, vec![0.5, 0.5, 0.5]);
        let r = check_theorem2(&sym, &cfg, FD_STEP, GRAD_REL_TOL).unwrap();
        assert!(r.analytic_or_loss_grad.iter().all(|g| g.abs() < 1e-10));
        assert!(r.oracle_grad.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn unfrozen_weights_break_theorem2() {
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let inst = FiniteInstance::random(4, 4, 1, 2).unwrap();
        let r = check_theorem2_unfrozen(&inst, &cfg, FD_STEP, GRAD_REL_TOL).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn vanishing_gradient_examples() {
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let mut inst = FiniteInstance::random(12, 4, 1, 2).unwrap();
        if let RewardModel::Table(rows) = &mut inst.reward_model {
            rows[0][3] = 0.999;
        }
        assert_eq!(check_vanishing_gradient(&inst, &cfg, 3, 0.0).unwrap(), 0.0);
        let g4 = check_vanishing_gradient(&inst, &cfg, 3, 1e-4).unwrap();
        let g6 = check_vanishing_gradient(&inst, &cfg, 3, 1e-6).unwrap();
        let g8 = check_vanishing_gradient(&inst, &cfg, 3, 1e-8).unwrap();
        assert!(g8 < 1e-6, "{g8}");
        assert!(g4 > g6 && g6 > g8, "{g4} {g6} {g8}");
    }

    #[test]
    fn loser_distribution_matches_enumeration() {
        let probs = [0.1, 0.4, 0.2, 0.3];
        let rewards = [0.5, 0.1, 0.9, 0.3];
        let k = 3;
        let closed = loser_distribution(&probs, &rewards, k);
        let mut enumerated = [0.0; 4];
        for t in Tuples::new(4, k).unwrap() {
            let w: f64 = t.iter().map(|&i| probs[i]).product();
            let r: Vec<f64> = t.iter().map(|&i| rewards[i]).collect();
            enumerated[t[argmin_reward(&r).unwrap()]] += w;
        }
        for (a, b) in closed.iter().zip(&enumerated) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let (vu, hu) = branch_probabilities(&probs, &rewards, k, 0.45);
        let (evu, ehu) = branch_probabilities_enumerated(&probs, &rewards, k, 0.45).unwrap();
        assert_abs_diff_eq!(vu, evu, epsilon = 1e-15);
        assert_abs_diff_eq!(hu, ehu, epsilon = 1e-15);
    }

    #[test]
    fn split_and_equivalent_forms() {
        let cfg = LossConfig { k: 3, ..LossConfig::default() };
        for seed in 0..10 {
            let inst = FiniteInstance::random(100 + seed, 6, 1, 1).unwrap();
            let rec = PreferenceRecord::new(Condition(0), inst.categorical().vocab().motion(inst.gt_groups[0][0]));
            let s = split_identity(&inst, &rec, &cfg).unwrap();
            assert!(s.residual() < 1e-10, "{s:?}");
            let e = equivalent_form(&inst, &rec, &cfg).unwrap();
            assert!(e.residual() < 1e-10, "{e:?}");
            assert!((e.z_vu + e.z_hu - 1.0).abs() < 1e-12);
            assert!((e.z_total_enumerated - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_examples() {
        let cfg = LossConfig { k: 2, ..LossConfig::default() };
        let (inst, rec) = random_bound_instance(5, &cfg).unwrap();
        let (d, u) = bound_pair(&inst, &rec, &cfg).unwrap();
        assert!(d < u);

        // theta == ref: difference term is log 1
        let same = FiniteInstance::new(
            inst.reference.policy().clone(),
            inst.reference.clone(),
            inst.reward_model.clone(),
            inst.gt_groups.clone(),
        )
        .unwrap();
        let (d, u) = bound_pair(&same, &rec, &cfg).unwrap();
        assert_eq!(d, u);

        let report = check_dsopo_usopo_bound(50, 1, &cfg).unwrap();
        assert_eq!(report.passes, 50);
    }

    #[test]
    fn instance_validation() {
        assert!(FiniteInstance::random(0, 9, 1, 2).is_err());
        assert!(FiniteInstance::random(0, 4, 5, 2).is_err());
        let inst = uniform_instance(3, 2, vec![0.1, 0.2, 0.3]);
        assert!(inst.clone().with_gt_distribution(vec![vec![(vec![0, 0], 1.0)]]).is_err());
        assert!(inst.with_gt_distribution(vec![vec![(vec![0, 1], 0.5)]]).is_err());
        let v = Arc::new(Vocabulary::random(3, 2, 1).unwrap());
        let p = Policy::Categorical(CategoricalPolicy::uniform(v, 1).unwrap());
        let tied = FiniteInstance::new(p.clone(), ReferenceSnapshot::freeze(&p), RewardModel::table(vec![vec![0.2, 0.2, 0.5]]).unwrap(), vec![vec![0]]);
        assert!(tied.is_err());
    }
}
