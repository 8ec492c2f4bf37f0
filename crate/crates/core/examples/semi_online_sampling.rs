//! Draws online candidate batches from a Gaussian policy, picks the loser,
//! and compares the empirical branch frequencies with the closed form on
//! a categorical policy.
//!
//! Run with `cargo run --example semi_online_sampling`.

use sopo_lab::bench::{build_setup, SetupConfig};
use sopo_lab::oracles::{self, FiniteInstance};
use sopo_lab::sampler::{generate_candidates, modipo_pairing, stream_seed};
use sopo_lab::{Branch, Condition, LossConfig};

fn main() -> sopo_lab::Result<()> {
    let setup = build_setup(&SetupConfig::default())?;
    let cfg = LossConfig::default();
    let c = Condition(0);

    for j in 0..4 {
        let batch = generate_candidates(&setup.generator, &setup.reward, c, &cfg, stream_seed(7, c, j))?;
        let rewards: Vec<String> = batch.rewards.iter().map(|r| format!("{r:.3}")).collect();
        println!("batch {j}: rewards [{}] loser #{} -> {:?}", rewards.join(", "), batch.loser_index, batch.branch);
    }
    let (best, worst) = modipo_pairing(setup.reference.policy(), &setup.reward, c, &cfg, 99)?;
    println!("best/worst pair from the frozen model: {:?} vs {:?}", best.coords(), worst.coords());

    let inst = FiniteInstance::random(4, 6, 1, 1)?;
    let probs = inst.categorical().probs(c)?;
    let rewards = inst.rewards_table()[0].clone();
    let (z_vu, z_hu) = oracles::branch_probabilities(&probs, &rewards, cfg.k, cfg.tau);
    let n = 20_000u64;
    let mut hu = 0u64;
    for i in 0..n {
        let batch = generate_candidates(&inst.policy, &inst.reward_model, c, &cfg, stream_seed(1, c, i))?;
        hu += (batch.branch == Branch::HighPreferenceUnpreferred) as u64;
    }
    println!("closed form Z_vu {z_vu:.4} Z_hu {z_hu:.4}; empirical Z_hu over {n} batches {:.4}", hu as f64 / n as f64);
    Ok(())
}
