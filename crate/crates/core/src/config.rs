//! Experiment configuration: JSON schema, defaults and validation.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Generator;
use crate::mdp::{enumerate_states, MdpConfig};
use crate::oracle::{Instance, SolverConfig};
use crate::policy::{PolicyConfig, SamplingRule};

fn default_eta() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    0.1
}
fn default_update_period() -> u64 {
    50
}
fn default_check_period() -> u64 {
    1
}
fn default_max_steps() -> u64 {
    1_000_000
}
fn default_trials() -> u64 {
    100
}
fn default_output_dir() -> String {
    "out".into()
}
fn default_family_points() -> usize {
    41
}
fn default_solver() -> SolverConfig {
    PolicyConfig::default().solver
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub states: usize,
    pub generator: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub theta_interval: [f64; 2],
    pub theta: Vec<f64>,
    #[serde(rename = "R")]
    pub max_delay: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub epsilon_exponent: Option<f64>,
    #[serde(default = "default_update_period")]
    pub update_period: u64,
    #[serde(default = "default_check_period")]
    pub check_period: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub sampling: SamplingRule,
    /// Frank–Wolfe settings used inside the policy's cache refreshes.
    #[serde(default = "default_solver")]
    pub solver: SolverConfig,
    /// Solver settings for the reported lower bound.
    #[serde(default)]
    pub bound_solver: SolverConfig,
    /// Grid size for `family.csv`.
    #[serde(default = "default_family_points")]
    pub family_points: usize,
}

/// Validated, ready-to-run form of a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub generator: Generator,
    pub instance: Instance,
    pub policy: PolicyConfig,
}

impl ExperimentConfig {
    /// Parses without validating, so overrides can be applied first.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            delta: self.delta,
            eta: self.eta,
            epsilon_exponent: self.epsilon_exponent,
            update_period: self.update_period,
            check_period: self.check_period,
            max_steps: self.max_steps,
            sampling: self.sampling,
            solver: self.solver,
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        if self.states < 2 {
            return Err(Error::config("states", "must be at least 2"));
        }
        if self.generator.len() != self.states {
            return Err(Error::config(
                "generator",
                format!("expected {} rows, got {}", self.states, self.generator.len()),
            ));
        }
        if let Some(row) = self.generator.iter().position(|r| r.len() != self.states) {
            return Err(Error::config(
                "generator",
                format!("row {row} has {} entries, expected {}", self.generator[row].len(), self.states),
            ));
        }
        if self.f.len() != self.states {
            return Err(Error::config(
                "f",
                format!("expected {} entries, got {}", self.states, self.f.len()),
            ));
        }
        let [lo, hi] = self.theta_interval;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("theta_interval", "need finite lo < hi"));
        }
        Generator::from_rows(&self.generator, self.f.clone(), lo, hi)
    }

    /// Re-checks every constraint the library relies on.
    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    pub fn build(&self) -> Result<Experiment> {
        let generator = self.generator()?;
        let k = self.theta.len();
        if k < 2 {
            return Err(Error::config("theta", "need at least 2 arms"));
        }
        let [lo, hi] = self.theta_interval;
        if let Some(t) = self.theta.iter().find(|t| !(lo..=hi).contains(*t)) {
            return Err(Error::config("theta", format!("{t} lies outside [{lo}, {hi}]")));
        }
        if self.max_delay < k {
            return Err(Error::config(
                "R",
                format!("R = {} must satisfy R >= K = {k}", self.max_delay),
            ));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.family_points < 2 {
            return Err(Error::config("family_points", "must be at least 2"));
        }
        if !(self.bound_solver.tol > 0.0) || self.bound_solver.max_iter == 0 {
            return Err(Error::config("bound_solver", "tol must be positive and max_iter at least 1"));
        }
        let space = Arc::new(enumerate_states(MdpConfig::new(k, self.max_delay, self.states)?)?);
        let policy = self.policy_config();
        policy.validate(space.n_states())?;
        let instance = match Instance::new(generator.clone(), self.theta.clone(), space) {
            Err(Error::NonUniqueBest) => {
                return Err(Error::config("theta", "best arm must be unique"))
            }
            other => other?,
        };
        Ok(Experiment {
            config: self.clone(),
            generator,
            instance,
            policy,
        })
    }
}
