//! Declarative run configuration.
//!
//! A run is described by a TOML file with one table per concern. Every table
//! and every field is optional; missing values take their defaults and
//! unknown fields are rejected.
//!
//! ```toml
//! [loss]
//! beta = 1.0
//! tau = 0.45
//!
//! [schedule]
//! t_steps = 50
//! omega = "snr"
//!
//! [run]
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{build_setup, BenchParams, SetupConfig};
use crate::diffusion::{DiffusionOptions, DiffusionTrainParams, NoiseSchedule, OmegaMode};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::oracles;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub omega: OmegaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_steps: 50, omega: OmegaMode::Const }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.t_steps, self.omega)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed.
    pub seed: u64,
    /// Number of consecutive seeds the bench sweeps, starting at `seed`.
    pub bench_seeds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, bench_seeds: 10, out_dir: None }
    }
}

/// Thresholds used by `verify`. A check passes when its residual is strictly
/// below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub grad_rel: f64,
    pub grad_abs_floor: f64,
    pub fd_step: f64,
    pub diffusion_fd_step: f64,
    pub identity: f64,
    pub partition: f64,
    pub degeneracy: f64,
    pub vanishing: f64,
    pub bound_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            grad_rel: oracles::GRAD_REL_TOL,
            grad_abs_floor: oracles::GRAD_ABS_FLOOR,
            fd_step: oracles::FD_STEP,
            diffusion_fd_step: crate::diffusion::DIFFUSION_FD_STEP,
            identity: 1e-10,
            partition: 1e-12,
            degeneracy: 1e-12,
            vanishing: 1e-6,
            bound_slack: oracles::BOUND_SLACK,
        }
    }
}

/// Sizes of the verification sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub instances: usize,
    pub bound_trials: usize,
    pub degeneracy_trials: usize,
    /// Minimum number of negative-control instances that must fail.
    pub negative_control_failures: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { instances: 20, bound_trials: 1000, degeneracy_trials: 1000, negative_control_failures: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub setup: SetupConfig,
    pub bench: BenchParams,
    pub diffusion: DiffusionTrainParams,
    pub diffusion_options: DiffusionOptions,
    pub run: RunSection,
    pub tolerances: Tolerances,
    pub verify: VerifySection,
}

/// Command-line overrides applied on top of a parsed file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub iters: Option<usize>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub c_const: Option<f64>,
    pub k: Option<usize>,
    pub t_steps: Option<usize>,
    pub omega: Option<OmegaMode>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies overrides. `iters` sets both the bench and diffusion loops.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.run.out_dir = Some(v.clone());
        }
        if let Some(v) = o.iters {
            self.bench.iters = v;
            self.diffusion.iters = v;
        }
        if let Some(v) = o.tau {
            self.loss.tau = v;
        }
        if let Some(v) = o.beta {
            self.loss.beta = v;
        }
        if let Some(v) = o.c_const {
            self.loss.c_const = v;
        }
        if let Some(v) = o.k {
            self.loss.k = v;
        }
        if let Some(v) = o.t_steps {
            self.schedule.t_steps = v;
        }
        if let Some(v) = o.omega {
            self.schedule.omega = v;
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap("loss", self.loss.validate())?;
        wrap("schedule", self.schedule.build().map(drop))?;
        wrap("setup", build_setup(&self.setup).map(drop))?;
        wrap("bench", self.bench.validate())?;
        wrap("diffusion", self.diffusion.validate())?;
        if self.run.bench_seeds == 0 {
            return Err(Error::Config("[run] bench_seeds must be positive".into()));
        }
        let t = &self.tolerances;
        let all = [t.grad_rel, t.grad_abs_floor, t.identity, t.partition, t.degeneracy, t.vanishing, t.bound_slack];
        if all.iter().any(|v| !(*v >= 0.0)) || !(t.fd_step > 0.0) || !(t.diffusion_fd_step > 0.0) {
            return Err(Error::Config("[tolerances] thresholds must be non-negative and steps positive".into()));
        }
        let v = &self.verify;
        if v.instances == 0 || v.bound_trials == 0 || v.degeneracy_trials == 0 || v.negative_control_failures > v.instances {
            return Err(Error::Config("[verify] sweep sizes must be positive and the failure quota at most `instances`".into()));
        }
        Ok(())
    }

    /// Output directory: the configured one, else `env_default`, else
    /// `sopo-out`.
    pub fn out_dir(&self, env_default: Option<&str>) -> PathBuf {
        self.run
            .out_dir
            .clone()
            .or_else(|| env_default.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sopo-out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml_str("[loss]\ntau = 0.3\n[schedule]\nomega = \"snr\"\n").unwrap();
        assert_eq!(c.loss.tau, 0.3);
        assert_eq!(c.loss.beta, 1.0);
        assert_eq!(c.schedule.omega, OmegaMode::Snr);
        assert_eq!(c.schedule.t_steps, 50);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = RunConfig::from_toml_str("[loss]\nbeta = 1.0\ngamma = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        let err = RunConfig::from_toml_str("[losses]\n").unwrap_err().to_string();
        assert!(err.contains("losses"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.loss.tau = 0.37;
        c.run.out_dir = Some("results/x".into());
        c.schedule.omega = OmegaMode::Snr;
        c.diffusion_options.shared_noise = true;
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&d.to_toml_string().unwrap()).unwrap(), d);
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { iters: Some(3), k: Some(1), omega: Some(OmegaMode::Snr), ..Overrides::default() });
        assert_eq!((c.bench.iters, c.diffusion.iters, c.schedule.omega), (3, 3, OmegaMode::Snr));
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("[loss]")));
        let mut c = RunConfig::default();
        c.setup.offline_unpreferred_covariance = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn output_directory_precedence() {
        let mut c = RunConfig::default();
        assert_eq!(c.out_dir(None), PathBuf::from("sopo-out"));
        assert_eq!(c.out_dir(Some("env-dir")), PathBuf::from("env-dir"));
        c.run.out_dir = Some("cfg-dir".into());
        assert_eq!(c.out_dir(Some("env-dir")), PathBuf::from("cfg-dir"));
    }
}
