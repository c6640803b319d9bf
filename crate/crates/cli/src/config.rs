//! Run configuration (TOML).
//!
//! ```toml
//! environment = "checkerboard.toml"   # relative to this file
//! seed = 7                            # default seed of every section
//!
//! [unfold-test]
//! n = 12
//! eps = [0.5, 0.25]
//!
//! [convergence-study]
//! n = 256
//! eps = [0.25, 0.125, 0.0625]
//! spec = { integrand = { kind = "quadratic" }, load = [1.0] }
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stoch_unfold::cell::DEFAULT_REFINEMENT;
use stoch_unfold::flow::FlowConfig;
use stoch_unfold::grid::Domain;
use stoch_unfold::integrand::Integrand;
use stoch_unfold::varmin::{ConvergenceConfig, QuenchedConfig};
use stoch_unfold::{Environment, Error, Result};

const SEEDED: [&str; 4] = ["minimize", "convergence-study", "quenched-study", "flow"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub environment: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub unfold_test: Option<UnfoldTestConfig>,
    pub cell: Option<CellConfig>,
    pub minimize: Option<ConvergenceConfig>,
    pub convergence_study: Option<ConvergenceConfig>,
    pub quenched_study: Option<QuenchedConfig>,
    pub flow: Option<FlowConfig>,
    pub korn: Option<KornConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnfoldTestConfig {
    pub n: usize,
    pub eps: Vec<f64>,
    /// Random fields per scale.
    pub trials: usize,
    pub tol: f64,
    pub projection_tol: f64,
}

impl Default for UnfoldTestConfig {
    fn default() -> Self {
        UnfoldTestConfig { n: 12, eps: vec![0.5, 0.25], trials: 50, tol: 1e-12, projection_tol: 1e-13 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default = "quadratic")]
    pub integrand: Integrand,
    /// Macroscopic gradients; defaults to the unit vectors.
    #[serde(rename = "F", default)]
    pub f: Vec<Vec<f64>>,
    /// Refinement levels, coarsest first.
    #[serde(default = "default_levels")]
    pub k: Vec<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Expected (extrapolated) value for each `F`.
    #[serde(default)]
    pub expect: Option<Vec<f64>>,
    #[serde(default = "default_expect_tol")]
    pub expect_tol: f64,
    /// Window study for i.i.d. media.
    #[serde(default)]
    pub rve: Option<RveConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RveConfig {
    pub side: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KornConfig {
    pub trials: usize,
    pub p: f64,
    /// Subdivision of every coefficient cell before sampling.
    pub refine: usize,
    pub tol: f64,
    pub fourier_tol: f64,
}

impl Default for KornConfig {
    fn default() -> Self {
        KornConfig { trials: 500, p: 2.0, refine: 1, tol: 1e-8, fourier_tol: 1e-10 }
    }
}

fn quadratic() -> Integrand {
    Integrand::Quadratic
}

fn default_levels() -> Vec<usize> {
    vec![DEFAULT_REFINEMENT]
}

fn default_tol() -> f64 {
    1e-11
}

fn default_expect_tol() -> f64 {
    1e-8
}

impl RunConfig {
    /// Parses a config; sections without `seed` inherit the global one.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let seed = value.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        for key in SEEDED {
            if let Some(toml::Value::Table(t)) = value.get_mut(key) {
                t.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves the environment path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.environment.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.environment = dir.join(&cfg.environment);
            }
        }
        Ok(cfg)
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::load(&self.environment).map_err(|e| match e {
            Error::Io(io) => Error::Parse(format!("cannot read environment {}: {io}", self.environment.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |tol: f64| -> Result<()> {
            if tol > 0.0 {
                Ok(())
            } else {
                Err(Error::Parse(format!("tol = {tol} must be positive")))
            }
        };
        let sweep = |n: usize, eps: &[f64], tol: f64| -> Result<()> {
            positive(tol)?;
            let domain = Domain::unit(1, n)?;
            for &e in eps {
                domain.coefficient_cells(e)?;
            }
            Ok(())
        };
        if let Some(c) = &self.unfold_test {
            sweep(c.n, &c.eps, c.tol)?;
            positive(c.projection_tol)?;
        }
        if let Some(c) = &self.cell {
            positive(c.tol)?;
            if c.k.is_empty() || c.k.contains(&0) {
                return Err(Error::Parse("cell.k needs positive refinement levels".into()));
            }
            if let Some(e) = &c.expect {
                if !c.f.is_empty() && e.len() != c.f.len() {
                    return Err(Error::Parse("cell.expect needs one value per F".into()));
                }
            }
        }
        for c in [&self.minimize, &self.convergence_study].into_iter().flatten() {
            sweep(c.n, &c.eps, c.tol)?;
        }
        if let Some(c) = &self.quenched_study {
            sweep(c.n, &c.eps, c.tol)?;
        }
        if let Some(c) = &self.flow {
            sweep(c.n, &c.eps, c.flow.tol)?;
            if !(c.flow.tau > 0.0) || !(c.flow.horizon >= c.flow.tau) {
                return Err(Error::Parse("flow needs 0 < tau <= horizon".into()));
            }
        }
        if let Some(c) = &self.korn {
            positive(c.tol)?;
            if c.refine == 0 {
                return Err(Error::Parse("korn.refine must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_inherit_global_seed() {
        let cfg = RunConfig::from_toml_str(
            r#"
environment = "env.toml"
seed = 11
[convergence-study]
n = 16
eps = [0.25]
spec = { integrand = { kind = "quadratic" } }
[quenched-study]
n = 16
eps = [0.25]
seeds = 4
seed = 3
spec = { integrand = { kind = "quadratic" } }
"#,
        )
        .unwrap();
        assert_eq!(cfg.convergence_study.unwrap().seed, 11);
        assert_eq!(cfg.quenched_study.unwrap().seed, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_incommensurate_scales() {
        assert!(matches!(RunConfig::from_toml_str("environment = \"e\"\nsede = 1\n"), Err(Error::Parse(_))));
        let bad = "environment = \"e\"\n[unfold-test]\nn = 16\neps = [0.3333333333333333]\n";
        assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Incommensurate { .. })));
        let ok = "environment = \"e\"\n[unfold-test]\nn = 18\neps = [0.3333333333333333]\n";
        assert!(RunConfig::from_toml_str(ok).is_ok());
    }
}
