//! Fine-tunes the affine toy denoiser with the semi-online diffusion loss
//! and samples from the result.
//!
//! Run with `cargo run --release --example diffusion_training`.

use sopo_lab::bench::{build_setup, SetupConfig};
use sopo_lab::diffusion::{ancestral_sample, train_diffusion, DiffusionOptions, DiffusionTrainParams, NoiseSchedule, OmegaMode};
use sopo_lab::{Condition, LossConfig};

fn main() -> sopo_lab::Result<()> {
    let setup = build_setup(&SetupConfig::default())?;
    let schedule = NoiseSchedule::cosine(50, OmegaMode::Const)?;
    let params = DiffusionTrainParams::default();
    let result = train_diffusion(&setup, &schedule, &LossConfig::default(), &DiffusionOptions::default(), &params, 0)?;
    for p in result.curve.iter().step_by(25) {
        println!("iter {:>4}  loss {:.4}  ema {:.4}  branches vu/hu {}/{}", p.iteration, p.loss, p.ema, p.vu_count, p.hu_count);
    }
    println!("totals: {} valuable-unpreferred, {} high-preference", result.vu_total, result.hu_total);
    for seed in 0..3 {
        let x = ancestral_sample(&result.theta, &schedule, Condition(0), seed)?;
        println!("sample {seed}: {:?}", x.coords());
    }
    Ok(())
}
