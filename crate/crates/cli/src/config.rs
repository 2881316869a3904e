//! Run configuration files.
//!
//! A config is a TOML document with one optional section per command:
//! `[experiment]` (plus `[simulate]` and `[paths]`) for Monte Carlo sweeps,
//! `[permanent_impact]` for the deterministic permanent-impact schedule and
//! `[pde]` for penalty sweeps. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use volex_core::hjb::{PdeGrid, SolverOptions};
use volex_core::montecarlo::ExperimentConfig;
use volex_core::{MarketParams, VolumeModel};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; `--seed` and `VOLEX_SEED` take precedence.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub simulate: SimulateSection,
    pub experiment: Option<ExperimentConfig>,
    pub paths: Option<PathsSection>,
    pub permanent_impact: Option<PermanentImpactSection>,
    pub pde: Option<PdeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Run the epsilon/rho cost sweep of `[experiment]`.
    #[serde(default = "yes")]
    pub sweep: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { sweep: true }
    }
}

fn yes() -> bool {
    true
}

/// One sample path of the three strategies, written to `paths.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub rho: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub index: u64,
}

/// Static schedule under volume-scaled permanent impact and log-normal volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermanentImpactSection {
    pub params: MarketParams,
    /// Log-volume drift `mu`.
    pub mu: f64,
    pub sigma: f64,
    pub v0: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub model: VolumeModel,
    pub lambdas: Vec<f64>,
    /// Initial inventory used for `J^lambda = x0^2 W^lambda(0, .)`.
    pub x0: f64,
    pub grid: PdeGrid,
    #[serde(default)]
    pub options: SolverOptions,
    /// Write one `w_lambda_<i>.csv` surface per penalty.
    #[serde(default)]
    pub write_surfaces: bool,
    /// Monte Carlo check of the penalised rule against `x0^2 W^lambda`.
    #[serde(default)]
    pub verify: Option<VerifySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub n_paths: usize,
    pub n_steps: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seed precedence: command line or `VOLEX_SEED` (resolved by the caller),
    /// then the config file, then zero.
    pub fn resolve_seed(&mut self, override_seed: Option<u64>) -> u64 {
        let seed = override_seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        if let Some(exp) = self.experiment.as_mut() {
            exp.seed = seed;
        }
        seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig::parse("seed = 3").unwrap();
        assert_eq!(c.resolve_seed(None), 3);
        assert_eq!(c.resolve_seed(Some(7)), 7);
        let mut c = RunConfig::parse("").unwrap();
        assert_eq!(c.resolve_seed(None), 0);
    }

    #[test]
    fn pde_section_parses() {
        let c = RunConfig::parse(
            r#"
            [pde]
            lambdas = [1.0, 10.0]
            x0 = 10.0
            grid = { horizon = 1.0, n_t = 100, n_y = 51 }
            model = { kind = "time_dep_bs", v0 = 100.0, drift = 0.5, vol = 0.3 }
            "#,
        )
        .unwrap();
        let pde = c.pde.unwrap();
        assert_eq!(pde.lambdas, vec![1.0, 10.0]);
        assert_eq!(pde.options, SolverOptions::default());
    }

    #[test]
    fn bundled_configs_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if let Some(exp) = &cfg.experiment {
                exp.validate().unwrap();
            }
            n += 1;
        }
        assert_eq!(n, 9);
    }
}
