//! Output files: `family.csv`, `bound.json`, `trials.csv`, `summary.json`.
//!
//! JSON outputs carry `schema_version`; readers reject any other version.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::family::Generator;
use crate::oracle::LowerBound;
use crate::sim::{RunStats, TrialRecord};

pub const SCHEMA_VERSION: u32 = 1;

pub const FAMILY_HEADER: &str = "theta,rho,eta";
pub const TRIALS_HEADER: &str = "trial,seed,tau,recommended,correct,censored";

/// `theta,rho,eta` on `points` evenly spaced parameters, endpoints included.
pub fn family_csv(generator: &Generator, points: usize) -> Result<String> {
    let iv = generator.interval();
    let mut out = String::from(FAMILY_HEADER);
    out.push('\n');
    for k in 0..points {
        let theta = if k + 1 == points {
            iv.hi
        } else {
            iv.lo + (iv.hi - iv.lo) * k as f64 / (points - 1) as f64
        };
        let rho = generator.perron(theta)?.rho;
        let eta = generator.mean_at(theta)?;
        writeln!(out, "{theta},{rho},{eta}").expect("write to String");
    }
    Ok(out)
}

/// `trial,seed,tau,recommended,correct,censored`; `recommended` is empty
/// for censored trials.
pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for r in records {
        let rec = r.recommended.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.trial, r.seed, r.tau, rec, r.correct as u8, r.censored as u8
        )
        .expect("write to String");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundReport {
    pub schema_version: u32,
    pub t_star: f64,
    pub t_unif: f64,
    pub fw_gap: f64,
    pub iterations: usize,
    /// `(state_index, arm, value)` for every non-zero entry.
    pub nu_star: Vec<(usize, usize, f64)>,
}

impl BoundReport {
    pub fn new(lb: &LowerBound, t_unif: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            t_star: lb.t_star,
            t_unif,
            fw_gap: lb.fw_gap,
            iterations: lb.iterations,
            nu_star: lb.nu_star.sparse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub schema_version: u32,
    #[serde(flatten)]
    pub stats: RunStats,
    pub t_star: f64,
    pub t_unif: f64,
    pub denominator: f64,
    pub config: ExperimentConfig,
}

impl SummaryReport {
    pub fn new(stats: RunStats, t_star: f64, t_unif: f64, config: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            denominator: stats.bound_denominator,
            stats,
            t_star,
            t_unif,
            config,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Parses a versioned output, rejecting other schema versions before the
/// body is interpreted.
pub fn read_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse("missing schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}
