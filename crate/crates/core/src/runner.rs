//! Drivers behind the `verify`, `bench` and `train-diffusion` commands.
//!
//! Each driver takes a validated [`RunConfig`] and an output directory,
//! writes its files and returns the process exit status it wants. Files
//! contain no timings, so two runs with the same configuration produce
//! byte-identical output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::{self, build_setup, eval_seed, evaluate_policy, median, BenchResult, Regime};
use crate::config::RunConfig;
use crate::diffusion::{self, check_diffusion_gradient, diffusion_split_identity, DiffusionInstance};
use crate::error::{Error, Result};
use crate::losses::{self, Branch, LossConfig, PreferenceRecord};
use crate::model::{Condition, Motion, Vocabulary};
use crate::oracles::{self, FiniteInstance, GradientReport};
use crate::sampler::stream_seed;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SOPO_OUT_DIR";

pub const VERIFY_REPORT: &str = "verify_report.jsonl";
pub const BENCH_SUMMARY: &str = "bench_summary.csv";
pub const DIFFUSION_CURVE: &str = "diffusion_curve.csv";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion_checkpoint.json";

/// How a check compares its measurement with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// `measured < threshold`.
    Below,
    /// `measured >= threshold`.
    AtLeast,
    /// `measured == threshold`.
    Exactly,
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check: String,
    pub measured: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub instances: usize,
    pub passed: bool,
}

impl CheckRecord {
    fn new(check: &str, measured: f64, threshold: f64, comparison: Comparison, instances: usize) -> Self {
        let passed = match comparison {
            Comparison::Below => measured < threshold,
            Comparison::AtLeast => measured >= threshold,
            Comparison::Exactly => measured == threshold,
        };
        Self { check: check.to_string(), measured, threshold, comparison, instances, passed }
    }
}

/// Residual of a gradient comparison under an absolute floor: zero when the
/// absolute difference is below the floor, the relative difference otherwise.
pub fn effective_residual(report: &GradientReport, abs_floor: f64) -> f64 {
    if report.max_abs_diff < abs_floor {
        0.0
    } else {
        report.rel_diff
    }
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// Small random instance shapes: vocabulary 3..=5, K 2..=3, 1..=2 conditions.
fn instance_shape(seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random_range(3..=5), rng.random_range(2..=3), rng.random_range(1..=2))
}

fn instance_seeds(master: u64, tag: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| stream_seed(master ^ tag, Condition(0), i)).collect()
}

/// Instance `i` for the offline gradient check; odd indices use a spread
/// preference distribution.
pub fn theorem1_instance(seed: u64, i: usize) -> Result<(FiniteInstance, LossConfig)> {
    let (v, k, c) = instance_shape(seed);
    let inst = if i.is_multiple_of(2) {
        FiniteInstance::random(seed, v, c, k)?
    } else {
        FiniteInstance::random_with_distribution(seed, v, c, k, 3)?
    };
    Ok((inst, LossConfig { k, ..LossConfig::default() }))
}

pub fn theorem2_instance(seed: u64) -> Result<(FiniteInstance, LossConfig)> {
    let (v, k, c) = instance_shape(seed);
    Ok((FiniteInstance::random(seed, v, c, k)?, LossConfig { k, ..LossConfig::default() }))
}

/// Instance with the probe item (index 3) at reward 0.999.
pub fn vanishing_instance(seed: u64) -> Result<FiniteInstance> {
    let mut inst = FiniteInstance::random(seed, 4, 1, 2)?;
    if let crate::model::RewardModel::Table(rows) = &mut inst.reward_model {
        rows[0][3] = 0.999;
    }
    Ok(inst)
}

/// Gradient norms at probe probabilities `1e-4`, `1e-6`, `1e-8`.
pub fn vanishing_norms(inst: &FiniteInstance) -> Result<[f64; 3]> {
    let cfg = LossConfig { k: 2, ..LossConfig::default() };
    Ok([
        oracles::check_vanishing_gradient(inst, &cfg, 3, 1e-4)?,
        oracles::check_vanishing_gradient(inst, &cfg, 3, 1e-6)?,
        oracles::check_vanishing_gradient(inst, &cfg, 3, 1e-8)?,
    ])
}

/// `|PL(K=2) - pairwise|` on one random instance.
pub fn degeneracy_residual(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = FiniteInstance::random(seed, 5, 1, 2)?;
    let beta = rng.random_range(0.1..5.0);
    let cfg = LossConfig { beta, k: 2, ..LossConfig::default() };
    let v = inst.categorical().vocab();
    let (a, b) = (inst.gt_groups[0][0], inst.gt_groups[0][1]);
    let rec = PreferenceRecord::ranked(Condition(0), vec![v.motion(a), v.motion(b)])?;
    let pl = losses::pl_offline_loss(&inst.policy, &inst.reference, &rec, &cfg)?;
    let pair = losses::dpo_pairwise_loss(&inst.policy, &inst.reference, &v.motion(a), &v.motion(b), Condition(0), &cfg)?;
    Ok((pl - pair).abs())
}

/// Instance for the split and equivalent-form identities: vocabulary
/// 3..=6, K 2..=3.
pub fn split_instance(seed: u64, base: &LossConfig) -> Result<(FiniteInstance, PreferenceRecord, LossConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(3..=6);
    let k = rng.random_range(2..=3);
    let inst = FiniteInstance::random(seed, vocab, 1, 1)?;
    let rec = PreferenceRecord::new(Condition(0), inst.categorical().vocab().motion(inst.gt_groups[0][0]));
    Ok((inst, rec, LossConfig { k, ..*base }))
}

/// Finite candidate support for the diffusion-level split identity.
pub fn diffusion_support(seed: u64) -> Result<(Vec<Motion>, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let support = Vocabulary::random(n, 2, rng.random())?.motions();
    let rewards: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Ok((support, rewards, raw.iter().map(|w| w / total).collect()))
}

/// Runs the whole verification suite and returns one record per check.
pub fn verify_checks(cfg: &RunConfig) -> Result<Vec<CheckRecord>> {
    let tol = &cfg.tolerances;
    let n = cfg.verify.instances;
    let seed = cfg.run.seed;
    let mut out = Vec::new();

    let t1: Vec<GradientReport> = instance_seeds(seed, 0x71, n)
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let (inst, lc) = theorem1_instance(s, i)?;
            oracles::check_theorem1(&inst, &lc, tol.fd_step, tol.grad_rel)
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new(
        "offline_gradient_matches_kl",
        worst(t1.iter().map(|r| effective_residual(r, tol.grad_abs_floor))),
        tol.grad_rel,
        Comparison::Below,
        n,
    ));

    let seeds2 = instance_seeds(seed, 0x72, n);
    let t2: Vec<(GradientReport, GradientReport)> = seeds2
        .par_iter()
        .map(|&s| {
            let (inst, lc) = theorem2_instance(s)?;
            Ok((
                oracles::check_theorem2(&inst, &lc, tol.fd_step, tol.grad_rel)?,
                oracles::check_theorem2_unfrozen(&inst, &lc, tol.fd_step, tol.grad_rel)?,
            ))
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new(
        "online_gradient_matches_kl_frozen",
        worst(t2.iter().map(|(r, _)| effective_residual(r, tol.grad_abs_floor))),
        tol.grad_rel,
        Comparison::Below,
        n,
    ));
    let control_failures = t2.iter().filter(|(_, r)| effective_residual(r, tol.grad_abs_floor) >= tol.grad_rel).count();
    out.push(CheckRecord::new(
        "online_negative_control_failures",
        control_failures as f64,
        cfg.verify.negative_control_failures as f64,
        Comparison::AtLeast,
        n,
    ));

    let norms = vanishing_norms(&vanishing_instance(seed)?)?;
    let mut rec = CheckRecord::new("vanishing_gradient_norm", norms[2], tol.vanishing, Comparison::Below, 1);
    rec.passed &= norms[0] > norms[1] && norms[1] > norms[2];
    out.push(rec);

    let trials = cfg.verify.degeneracy_trials;
    let deg: Vec<f64> = instance_seeds(seed, 0x74, trials).par_iter().map(|&s| degeneracy_residual(s)).collect::<Result<_>>()?;
    out.push(CheckRecord::new("pl_pairwise_k2_degeneracy", worst(deg), tol.degeneracy, Comparison::Below, trials));

    let ident: Vec<(oracles::SplitReport, oracles::EquivalentFormReport)> = instance_seeds(seed, 0x75, n)
        .par_iter()
        .map(|&s| {
            let (inst, rec, lc) = split_instance(s, &cfg.loss)?;
            Ok((oracles::split_identity(&inst, &rec, &lc)?, oracles::equivalent_form(&inst, &rec, &lc)?))
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new("dsopo_split_identity", worst(ident.iter().map(|(s, _)| s.residual())), tol.identity, Comparison::Below, n));
    out.push(CheckRecord::new(
        "equivalent_form_identity",
        worst(ident.iter().map(|(_, e)| e.residual())),
        tol.identity,
        Comparison::Below,
        n,
    ));
    out.push(CheckRecord::new(
        "branch_partition_sum",
        worst(ident.iter().flat_map(|(_, e)| [(e.z_vu + e.z_hu - 1.0).abs(), (e.z_total_enumerated - 1.0).abs()])),
        tol.partition,
        Comparison::Below,
        n,
    ));

    let bound = oracles::check_dsopo_usopo_bound(cfg.verify.bound_trials, seed, &cfg.loss)?;
    let mut rec = CheckRecord::new("dsopo_usopo_upper_bound", bound.worst_gap, tol.bound_slack, Comparison::Below, bound.trials);
    rec.passed = bound.worst_gap <= tol.bound_slack && bound.passes == bound.trials;
    out.push(rec);
    let eq_gap: Vec<f64> = (0..n as u64)
        .map(|i| {
            let (inst, record) = oracles::random_bound_instance(seed.wrapping_add(i), &cfg.loss)?;
            let at_ref = FiniteInstance::new(inst.reference.policy().clone(), inst.reference.clone(), inst.reward_model, inst.gt_groups)?;
            let (d, u) = oracles::bound_pair(&at_ref, &record, &cfg.loss)?;
            Ok((d - u).abs())
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new("dsopo_usopo_equal_at_reference", worst(eq_gap), 0.0, Comparison::Exactly, n));

    let entropy: Vec<f64> = instance_seeds(seed, 0x76, n)
        .par_iter()
        .map(|&s| {
            let (inst, lc) = theorem2_instance(s)?;
            let gap = oracles::exact_online_objective(&inst, &lc)? - oracles::exact_weighted_kl_online(&inst, &lc)?;
            Ok((gap - oracles::weighted_rank_entropy(&inst, &inst.policy, &lc)?).abs())
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new("online_entropy_gap", worst(entropy), tol.identity, Comparison::Below, n));

    let omega = cfg.schedule.omega;
    let diff: Vec<(f64, f64)> = instance_seeds(seed, 0x77, n)
        .par_iter()
        .map(|&s| {
            let mut res = 0.0f64;
            let mut log2 = 0.0f64;
            for branch in [Branch::ValuableUnpreferred, Branch::HighPreferenceUnpreferred] {
                let mut inst = DiffusionInstance::random(s, branch, omega)?;
                let r = check_diffusion_gradient(&inst, tol.diffusion_fd_step, tol.grad_rel)?;
                res = res.max(effective_residual(&r, tol.grad_abs_floor));
                inst.theta = inst.reference.clone();
                log2 = log2.max((inst.loss_grad(&inst.theta)?.value - std::f64::consts::LN_2).abs());
            }
            Ok((res, log2))
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new("diffusion_gradient", worst(diff.iter().map(|d| d.0)), tol.grad_rel, Comparison::Below, 2 * n));
    out.push(CheckRecord::new("diffusion_log2_at_reference", worst(diff.iter().map(|d| d.1)), tol.degeneracy, Comparison::Below, 2 * n));

    let dsplit: Vec<f64> = instance_seeds(seed, 0x78, n)
        .par_iter()
        .map(|&s| {
            let inst = DiffusionInstance::random(s, Branch::ValuableUnpreferred, omega)?;
            let (support, rewards, probs) = diffusion_support(s)?;
            Ok(diffusion_split_identity(&inst, &support, &rewards, &probs)?.residual())
        })
        .collect::<Result<_>>()?;
    out.push(CheckRecord::new("diffusion_split_identity", worst(dsplit), tol.identity, Comparison::Below, n));

    Ok(out)
}

/// What a driver produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

pub fn run_verify(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let records = verify_checks(cfg)?;
    let mut jsonl = String::new();
    let mut summary = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?);
        jsonl.push('\n');
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(summary, "{verdict} {:<36} measured {:<12.3e} threshold {:.3e}", r.check, r.measured, r.threshold);
    }
    let path = write_file(out_dir, VERIFY_REPORT, &jsonl)?;
    let failed = records.iter().filter(|r| !r.passed).count();
    let _ = writeln!(summary, "{} checks, {failed} failed", records.len());
    Ok(Outcome { exit_code: i32::from(failed > 0), files: vec![path], summary })
}

fn join_params(p: &[f64]) -> String {
    p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn run_bench(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let setup = build_setup(&cfg.setup)?;
    let seeds: Vec<u64> = (0..cfg.run.bench_seeds as u64).map(|i| cfg.run.seed + i).collect();
    let results = bench::run_all(&setup, &cfg.loss, &cfg.bench, &seeds)?;
    let initial: Vec<bench::Evaluation> = seeds
        .iter()
        .map(|&s| evaluate_policy(&setup.generator, &setup, cfg.loss.tau, cfg.bench.n_eval, eval_seed(s)))
        .collect::<Result<_>>()?;

    let mut files = Vec::new();
    for regime in Regime::ALL {
        let mut csv = String::from("seed,iteration,loss,mean_reward,low_reward_mass\n");
        for r in results.iter().filter(|r| r.regime == regime) {
            for p in &r.curve {
                let _ = writeln!(csv, "{},{},{},{},{}", r.seed, p.iteration, p.loss, p.mean_reward, p.low_reward_mass);
            }
        }
        files.push(write_file(out_dir, &format!("bench_{regime}.csv"), &csv)?);
    }

    let mut csv = String::from("regime,seed,mean_reward,mean_reward_se,low_reward_mass,low_reward_mass_se,final_params\n");
    for (s, e) in seeds.iter().zip(&initial) {
        let _ = writeln!(
            csv,
            "initial,{s},{},{},{},{},{}",
            e.mean_reward,
            e.mean_reward_se,
            e.low_reward_mass,
            e.low_reward_mass_se,
            join_params(setup.generator.params())
        );
    }
    for r in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.regime,
            r.seed,
            r.mean_reward,
            r.mean_reward_se,
            r.low_reward_mass,
            r.low_reward_mass_se,
            join_params(&r.final_params)
        );
    }
    files.push(write_file(out_dir, BENCH_SUMMARY, &csv)?);

    let summary = bench_table(&results, &initial);
    Ok(Outcome { exit_code: 0, files, summary })
}

/// Median reward and low-reward mass per regime, as a text table.
pub fn bench_table(results: &[BenchResult], initial: &[bench::Evaluation]) -> String {
    let mut s = format!("{:<8} {:>14} {:>16}\n", "regime", "median reward", "median low mass");
    let med = |f: &dyn Fn(&bench::Evaluation) -> f64| median(&initial.iter().map(f).collect::<Vec<_>>());
    let _ = writeln!(s, "{:<8} {:>14.4} {:>16.4}", "initial", med(&|e| e.mean_reward), med(&|e| e.low_reward_mass));
    for regime in Regime::ALL {
        let rows: Vec<&BenchResult> = results.iter().filter(|r| r.regime == regime).collect();
        let m = median(&rows.iter().map(|r| r.mean_reward).collect::<Vec<_>>());
        let l = median(&rows.iter().map(|r| r.low_reward_mass).collect::<Vec<_>>());
        let _ = writeln!(s, "{:<8} {:>14.4} {:>16.4}", regime.name(), m, l);
    }
    s
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    seed: u64,
    iterations: usize,
    t_steps: usize,
    omega: diffusion::OmegaMode,
    vu_total: usize,
    hu_total: usize,
    theta: &'a diffusion::Denoiser,
    reference: &'a diffusion::Denoiser,
}

pub fn run_train_diffusion(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let setup = build_setup(&cfg.setup)?;
    let schedule = cfg.schedule.build()?;
    let result = diffusion::train_diffusion(&setup, &schedule, &cfg.loss, &cfg.diffusion_options, &cfg.diffusion, cfg.run.seed)?;
    let mut csv = String::from("iteration,loss,ema,vu_count,hu_count\n");
    for p in &result.curve {
        let _ = writeln!(csv, "{},{},{},{},{}", p.iteration, p.loss, p.ema, p.vu_count, p.hu_count);
    }
    let curve = write_file(out_dir, DIFFUSION_CURVE, &csv)?;
    let ckpt = Checkpoint {
        seed: cfg.run.seed,
        iterations: cfg.diffusion.iters,
        t_steps: schedule.t_max(),
        omega: schedule.mode(),
        vu_total: result.vu_total,
        hu_total: result.hu_total,
        theta: &result.theta,
        reference: &result.reference,
    };
    let json = serde_json::to_string_pretty(&ckpt).map_err(|e| Error::Io(e.to_string()))?;
    let checkpoint = write_file(out_dir, DIFFUSION_CHECKPOINT, &json)?;
    let mut summary = String::new();
    if let (Some(first), Some(last)) = (result.curve.first(), result.curve.last()) {
        let _ = writeln!(summary, "ema loss {:.4} -> {:.4} over {} iterations", first.ema, last.ema, result.curve.len());
    }
    let _ = writeln!(summary, "branches: {} valuable-unpreferred, {} high-preference", result.vu_total, result.hu_total);
    Ok(Outcome { exit_code: 0, files: vec![curve, checkpoint], summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.verify.instances = 4;
        c.verify.bound_trials = 20;
        c.verify.degeneracy_trials = 20;
        c.verify.negative_control_failures = 3;
        c.bench.iters = 10;
        c.bench.n_pairs = 8;
        c.bench.n_eval = 1000;
        c.run.bench_seeds = 2;
        c.diffusion.iters = 5;
        c.diffusion.batch_size = 4;
        c
    }

    #[test]
    fn check_record_comparisons() {
        assert!(CheckRecord::new("a", 0.5, 1.0, Comparison::Below, 1).passed);
        assert!(!CheckRecord::new("a", 0.0, 0.0, Comparison::Below, 1).passed);
        assert!(CheckRecord::new("a", 15.0, 15.0, Comparison::AtLeast, 1).passed);
        assert!(CheckRecord::new("a", 0.0, 0.0, Comparison::Exactly, 1).passed);
    }

    #[test]
    fn small_verify_passes_and_zero_tolerance_fails() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_verify(&small(), dir.path()).unwrap();
        assert_eq!(o.exit_code, 0, "{}", o.summary);
        let mut c = small();
        let t = &mut c.tolerances;
        (t.grad_rel, t.grad_abs_floor, t.identity, t.partition, t.degeneracy, t.vanishing, t.bound_slack) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let o = run_verify(&c, dir.path()).unwrap();
        assert_eq!(o.exit_code, 1);
        let report = fs::read_to_string(dir.path().join(VERIFY_REPORT)).unwrap();
        assert!(report.lines().all(|l| l.contains("\"measured\"")));
        assert!(report.contains("\"passed\":false"));
    }

    #[test]
    fn bench_and_diffusion_write_their_files() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_bench(&small(), dir.path()).unwrap();
        assert_eq!(o.files.len(), 5);
        let summary = fs::read_to_string(dir.path().join(BENCH_SUMMARY)).unwrap();
        assert_eq!(summary.lines().count(), 1 + 2 + 4 * 2);
        let o = run_train_diffusion(&small(), dir.path()).unwrap();
        assert_eq!(o.exit_code, 0);
        let curve = fs::read_to_string(dir.path().join(DIFFUSION_CURVE)).unwrap();
        assert_eq!(curve.lines().count(), 6);
    }
}
