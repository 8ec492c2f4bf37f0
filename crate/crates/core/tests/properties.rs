use std::f64::consts::LN_2;

use proptest::prelude::*;
use sopo_lab::bench::{median, spearman};
use sopo_lab::config::RunConfig;
use sopo_lab::diffusion::{DiffusionInstance, NoiseSchedule, OmegaMode};
use sopo_lab::enumerate::Tuples;
use sopo_lab::losses::{self, pl_rank_probs};
use sopo_lab::model::cosine_similarity;
use sopo_lab::numeric::{log_sum_exp, neg_log_sigmoid, softplus};
use sopo_lab::oracles::{self, FiniteInstance};
use sopo_lab::{runner, Branch, Condition, LossConfig, Motion};

fn permutations(k: usize) -> Vec<Vec<usize>> {
    Tuples::new(k, k).unwrap().filter(|t| (0..k).all(|i| t.contains(&i))).collect()
}

fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plackett_luce_is_a_distribution_over_orderings(weights in prop::collection::vec(0.01f64..10.0, 2..=4)) {
        let total: f64 = permutations(weights.len())
            .iter()
            .map(|perm| {
                let w: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
                pl_rank_probs(&w).unwrap().as_slice().iter().product::<f64>()
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loser_distribution_matches_enumeration(
        raw in prop::collection::vec(0.05f64..1.0, 2..=5),
        rewards in prop::collection::vec(0.0f64..1.0, 5),
        k in 1usize..=3,
    ) {
        let probs = normalized(&raw);
        let rewards = &rewards[..probs.len()];
        let closed = oracles::loser_distribution(&probs, rewards, k);
        let mut brute = vec![0.0; probs.len()];
        for t in Tuples::new(probs.len(), k).unwrap() {
            let r: Vec<f64> = t.iter().map(|&i| rewards[i]).collect();
            brute[t[losses::argmin_reward(&r).unwrap()]] += t.iter().map(|&i| probs[i]).product::<f64>();
        }
        prop_assert!((closed.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in closed.iter().zip(&brute) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_probabilities_partition_unity(
        raw in prop::collection::vec(0.05f64..1.0, 2..=5),
        rewards in prop::collection::vec(0.0f64..1.0, 5),
        k in 1usize..=3,
        tau in 0.0f64..1.0,
    ) {
        let probs = normalized(&raw);
        let rewards = &rewards[..probs.len()];
        let (vu, hu) = oracles::branch_probabilities(&probs, rewards, k, tau);
        let (evu, ehu) = oracles::branch_probabilities_enumerated(&probs, rewards, k, tau).unwrap();
        prop_assert!((vu + hu - 1.0).abs() < 1e-12);
        prop_assert!((vu - evu).abs() < 1e-12 && (hu - ehu).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&hu));
    }

    #[test]
    fn split_and_branch_forms_agree(seed in 0u64..10_000) {
        let (inst, rec, cfg) = runner::split_instance(seed, &LossConfig::default()).unwrap();
        prop_assert!(oracles::split_identity(&inst, &rec, &cfg).unwrap().residual() < 1e-10);
        prop_assert!(oracles::equivalent_form(&inst, &rec, &cfg).unwrap().residual() < 1e-10);
    }

    #[test]
    fn direct_loss_never_exceeds_unified_on_constrained_instances(seed in 0u64..10_000) {
        let cfg = LossConfig::default();
        let (inst, rec) = oracles::random_bound_instance(seed, &cfg).unwrap();
        let (d, u) = oracles::bound_pair(&inst, &rec, &cfg).unwrap();
        prop_assert!(d <= u + oracles::BOUND_SLACK);
    }

    #[test]
    fn every_loss_is_log_two_at_the_reference(seed in 0u64..10_000, k in 2usize..=4) {
        let inst = FiniteInstance::random(seed, 5, 1, k).unwrap();
        let at_ref = inst.with_params(inst.reference.policy().params()).unwrap();
        let cfg = LossConfig { k, ..LossConfig::default() };
        let vocab = at_ref.categorical().vocab();
        let (w, l) = (vocab.motion(0), vocab.motion(1));
        let pair = losses::dpo_pairwise_loss(&at_ref.policy, &at_ref.reference, &w, &l, Condition(0), &cfg).unwrap();
        prop_assert!((pair - LN_2).abs() < 1e-12);
        let candidates: Vec<Motion> = (1..=k).map(|i| vocab.motion(i % 5)).collect();
        let rec = sopo_lab::PreferenceRecord::new(Condition(0), w);
        let d = losses::dsopo_loss(&at_ref.policy, &at_ref.reference, &at_ref.reward_model, &rec, &candidates, Condition(0), &cfg).unwrap();
        prop_assert!((d - LN_2).abs() < 1e-12);
    }

    #[test]
    fn winner_weight_stays_in_its_band(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        beta in 0.1f64..3.0,
        c in 1.0f64..4.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let s = cosine_similarity(&Motion::point(a).unwrap(), &Motion::point(b).unwrap()).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        let cfg = LossConfig { beta, c_const: c, ..LossConfig::default() };
        let w = losses::win_weight(s, &cfg);
        prop_assert!(w >= beta * (c - 1.0) - 1e-12 && w <= beta * (c + 1.0) + 1e-12);
    }

    #[test]
    fn branch_is_decided_by_the_lowest_reward(rewards in prop::collection::vec(0.0f64..1.0, 1..6), tau in 0.0f64..1.0) {
        let lo = rewards[losses::argmin_reward(&rewards).unwrap()];
        let expect = if rewards.iter().all(|r| *r >= tau) { Branch::HighPreferenceUnpreferred } else { Branch::ValuableUnpreferred };
        prop_assert_eq!(Branch::from_reward(lo, tau), expect);
    }

    #[test]
    fn cosine_schedule_is_well_formed(t_max in 1usize..200) {
        let s = NoiseSchedule::cosine(t_max, OmegaMode::Snr).unwrap();
        let mut prev = 1.0;
        for t in 0..t_max {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < prev);
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) <= 0.999);
            prop_assert!(s.omega(t) > 0.0 && s.omega(t).is_finite());
            prev = ab;
        }
    }

    #[test]
    fn diffusion_loss_is_log_two_at_the_reference(seed in 0u64..10_000, high in any::<bool>()) {
        let branch = if high { Branch::HighPreferenceUnpreferred } else { Branch::ValuableUnpreferred };
        let mut inst = DiffusionInstance::random(seed, branch, OmegaMode::Const).unwrap();
        inst.theta = inst.reference.clone();
        prop_assert!((inst.loss_grad(&inst.theta).unwrap().value - LN_2).abs() <= 1e-12);
    }

    #[test]
    fn config_round_trips(beta in 0.01f64..5.0, tau in 0.0f64..1.0, k in 2usize..8, t in 1usize..100, snr in any::<bool>(), seed in any::<u32>()) {
        let mut cfg = RunConfig::default();
        cfg.loss.beta = beta;
        cfg.loss.tau = tau;
        cfg.loss.k = k;
        cfg.schedule.t_steps = t;
        cfg.schedule.omega = if snr { OmegaMode::Snr } else { OmegaMode::Const };
        cfg.run.seed = seed as u64;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn stable_scalar_functions(z in -700.0f64..700.0) {
        prop_assert!((softplus(-z) - neg_log_sigmoid(z)).abs() <= 1e-12 * (1.0 + z.abs()));
        prop_assert!(softplus(z) >= 0.0 && softplus(z) >= z);
        let lse = log_sum_exp(&[z, 0.0]);
        prop_assert!((lse - softplus(z)).abs() <= 1e-12 * (1.0 + z.abs()));
    }

    #[test]
    fn rank_statistics_are_bounded_and_order_free(mut v in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        let w: Vec<f64> = v.iter().map(|x| x * x).collect();
        let rho = spearman(&v, &w).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert!((spearman(&w, &v).unwrap() - rho).abs() < 1e-12);
        let m = median(&v);
        v.reverse();
        prop_assert_eq!(median(&v), m);
    }
}
