//! Builds a run from a TOML document, applies overrides the way the CLI
//! does, and runs the verification suite into a temporary directory.
//!
//! Run with `cargo run --release --example config_run`.

use sopo_lab::config::{Overrides, RunConfig};
use sopo_lab::runner;

const DOC: &str = r#"
[loss]
beta = 0.5
k = 3

[verify]
instances = 8
bound_trials = 200
degeneracy_trials = 200
negative_control_failures = 6

[run]
seed = 42
"#;

fn main() -> sopo_lab::Result<()> {
    let mut cfg = RunConfig::from_toml_str(DOC)?;
    cfg.apply(&Overrides { tau: Some(0.5), ..Overrides::default() });
    cfg.validate()?;
    let out = std::env::temp_dir().join("sopo-config-run");
    let outcome = runner::run_verify(&cfg, &out)?;
    print!("{}", outcome.summary);
    println!("exit code {}; files {:?}", outcome.exit_code, outcome.files);
    println!("effective config:\n{}", cfg.to_toml_string()?);
    Ok(())
}
