use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sopo_lab::config::{Overrides, RunConfig};
use sopo_lab::diffusion::OmegaMode;
use sopo_lab::runner::{self, OUT_DIR_ENV};
use sopo_lab::Error;

#[derive(Parser)]
#[command(name = "sopo", version, about = "Semi-online preference optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exact-enumeration and finite-difference checks.
    Verify(Flags),
    /// Train the 2D toy under every regime and compare.
    Bench(Flags),
    /// Fine-tune the toy diffusion policy.
    TrainDiffusion(Flags),
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "c-const")]
    c_const: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "t-steps")]
    t_steps: Option<usize>,
    #[arg(long, value_parser = ["const", "snr"])]
    omega: Option<String>,
}

fn prepare(flags: Flags) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let omega = flags.omega.as_deref().map(str::parse::<OmegaMode>).transpose().map_err(|e| Error::Config(e.to_string()))?;
    cfg.apply(&Overrides {
        seed: flags.seed,
        out_dir: None,
        iters: flags.iters,
        tau: flags.tau,
        beta: flags.beta,
        c_const: flags.c_const,
        k: flags.k,
        t_steps: flags.t_steps,
        omega,
    });
    cfg.validate()?;
    let env_out = std::env::var(OUT_DIR_ENV).ok();
    let out = flags.out.unwrap_or_else(|| cfg.out_dir(env_out.as_deref()));
    Ok((cfg, out))
}

type Driver = fn(&RunConfig, &std::path::Path) -> sopo_lab::Result<runner::Outcome>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (flags, driver): (Flags, Driver) = match cli.command {
        Command::Verify(f) => (f, runner::run_verify),
        Command::Bench(f) => (f, runner::run_bench),
        Command::TrainDiffusion(f) => (f, runner::run_train_diffusion),
    };
    let result = prepare(flags).and_then(|(cfg, out)| driver(&cfg, &out));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
