//! One-parameter sweeps over independent simulations.

use serde::Serialize;

use crate::parallel;

use super::config::{ConfigError, SimConfig};
use super::output::Summary;
use super::sim::run_simulation;

/// `key=a:b:n`, `n` evenly spaced values from `a` to `b` inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRange {
    pub key: String,
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl SweepRange {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let bad = |m: &str| ConfigError::Override(text.to_string(), m.to_string());
        let (key, range) = text.split_once('=').ok_or_else(|| bad("expected key=a:b:n"))?;
        let parts: Vec<&str> = range.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(bad("expected a:b:n after '='"));
        };
        let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite());
        let (start, end) = (num(a).ok_or_else(|| bad("bad start"))?, num(b).ok_or_else(|| bad("bad end"))?);
        let count: usize = n.trim().parse().map_err(|_| bad("bad count"))?;
        if count == 0 || key.trim().is_empty() {
            return Err(bad("need a key and at least one point"));
        }
        Ok(Self { key: key.trim().to_string(), start, end, count })
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.start + step * i as f64).collect()
    }

    /// Validated configurations, one per sweep value.
    pub fn configs(&self, base: &SimConfig) -> Result<Vec<SimConfig>, ConfigError> {
        self.values().into_iter().map(|v| base.with_override(&self.key, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub key: String,
    pub value: f64,
    pub summary: Summary,
}

/// Runs every sweep point; parallel across points, sequential within each run.
pub fn run_sweep(base: &SimConfig, range: &SweepRange) -> Result<Vec<SweepPoint>, ConfigError> {
    let jobs: Vec<(f64, SimConfig)> = range.values().into_iter().zip(range.configs(base)?).collect();
    Ok(parallel::map(&jobs, |(value, cfg)| SweepPoint {
        key: range.key.clone(),
        value: *value,
        summary: Summary::new(&run_simulation(cfg), &cfg.obstacles),
    }))
}
