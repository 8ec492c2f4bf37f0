//! Exact split of the direct semi-online loss into its two branches, the
//! branch-form equivalence, and the direct <= unified ordering.
//!
//! Run with `cargo run --release --example split_and_bound`.

use sopo_lab::oracles;
use sopo_lab::runner;
use sopo_lab::LossConfig;

fn main() -> sopo_lab::Result<()> {
    let base = LossConfig::default();
    for seed in 0..4 {
        let (inst, rec, cfg) = runner::split_instance(seed, &base)?;
        let s = oracles::split_identity(&inst, &rec, &cfg)?;
        let e = oracles::equivalent_form(&inst, &rec, &cfg)?;
        println!(
            "seed {seed}: E[direct] {:.6} = L_vu {:.6} + L_hu {:.6} (Z_vu {:.3}, Z_hu {:.3}); unified branch {:.6} split {:.6}",
            s.tuple_expectation, s.l_vu, s.l_hu, s.z_vu, s.z_hu, e.usopo_branch, e.usopo_split
        );
    }
    let report = oracles::check_dsopo_usopo_bound(500, 3, &base)?;
    println!(
        "direct <= unified on {}/{} constrained instances ({} strict, worst gap {:.2e})",
        report.passes, report.trials, report.strict, report.worst_gap
    );
    Ok(())
}
