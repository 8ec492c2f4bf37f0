//! Trains the 2D Gaussian policy under the offline, online, best/worst and
//! semi-online regimes and prints the median table.
//!
//! Run with `cargo run --release --example synthetic_bench -- [seeds]`.

use sopo_lab::bench::{build_setup, eval_seed, evaluate_policy, run_all, BenchParams, SetupConfig};
use sopo_lab::runner::bench_table;
use sopo_lab::LossConfig;

fn main() -> sopo_lab::Result<()> {
    let n_seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let setup = build_setup(&SetupConfig::default())?;
    let cfg = LossConfig::default();
    let params = BenchParams::default();
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let results = run_all(&setup, &cfg, &params, &seeds)?;
    let initial = seeds
        .iter()
        .map(|&s| evaluate_policy(&setup.generator, &setup, cfg.tau, params.n_eval, eval_seed(s)))
        .collect::<sopo_lab::Result<Vec<_>>>()?;
    print!("{}", bench_table(&results, &initial));
    for r in results.iter().filter(|r| r.seed == 0) {
        println!("seed 0 {:<7} final params {:?}", r.regime.name(), r.final_params.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    Ok(())
}
