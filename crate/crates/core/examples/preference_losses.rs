//! Evaluates every preference loss on one small categorical problem and
//! prints values plus gradient norms.
//!
//! Run with `cargo run --example preference_losses`.

use std::sync::Arc;

use sopo_lab::losses::{self, LossGrad};
use sopo_lab::model::{CategoricalPolicy, Vocabulary};
use sopo_lab::{Condition, LossConfig, Policy, PreferenceRecord, ReferenceSnapshot, RewardModel};

fn norm(g: &LossGrad) -> f64 {
    g.grad.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> sopo_lab::Result<()> {
    let vocab = Arc::new(Vocabulary::random(5, 3, 11)?);
    let reference = ReferenceSnapshot::freeze(&Policy::Categorical(CategoricalPolicy::uniform(vocab.clone(), 1)?));
    let policy = Policy::Categorical(CategoricalPolicy::new(vocab.clone(), 1, vec![0.4, -0.2, 0.1, 0.7, -0.5])?);
    let rewards = RewardModel::table(vec![vec![0.9, 0.2, 0.6, 0.35, 0.75]])?;
    let cfg = LossConfig::default();
    let c = Condition(0);

    let winner = vocab.motion(0);
    let loser = vocab.motion(1);
    let pair = losses::dpo_pairwise_loss_grad(&policy, &reference, &winner, &loser, c, &cfg)?;
    println!("pairwise DPO           {:.6}  |grad| {:.4}", pair.value, norm(&pair));

    let ranked = PreferenceRecord::ranked(c, vec![vocab.motion(0), vocab.motion(4), vocab.motion(2)])?;
    let pl = losses::pl_offline_loss_grad(&policy, &reference, &ranked, &cfg)?;
    println!("Plackett-Luce (K=3)    {:.6}  |grad| {:.4}", pl.value, norm(&pl));

    let candidates: Vec<_> = [2, 3, 1, 4].iter().map(|&i| vocab.motion(i)).collect();
    let online = losses::online_dpo_loss_grad(&policy, &reference, &rewards, &candidates, c, &cfg)?;
    println!("online DPO (K=4)       {:.6}  |grad| {:.4}", online.value, norm(&online));

    let record = PreferenceRecord::new(c, winner);
    for (name, f) in [
        ("direct semi-online", losses::dsopo_loss_grad as fn(_, _, _, _, _, _, _) -> _),
        ("unified semi-online", losses::usopo_loss_grad),
        ("reweighted semi-online", losses::sopo_loss_grad),
    ] {
        let g: LossGrad = f(&policy, &reference, &rewards, &record, &candidates, c, &cfg)?;
        println!("{name:<22} {:.6}  |grad| {:.4}", g.value, norm(&g));
    }
    let s = losses::min_similarity(&record.winner, &candidates)?;
    println!("min cosine S = {s:.4}, winner weight beta (C - S) = {:.4}", losses::win_weight(s, &cfg));
    Ok(())
}
