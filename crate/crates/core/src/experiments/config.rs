//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ErgodicLimit,
    CltTable,
    Deviations,
    CltKs,
    StrongOrder,
    MomentScan,
    Contractivity,
    BiasOrder,
    PoissonSolve,
    PoissonCheck,
    Variance,
    Decomposition,
}

impl Experiment {
    pub const ALL: [Experiment; 12] = [
        Experiment::ErgodicLimit,
        Experiment::CltTable,
        Experiment::Deviations,
        Experiment::CltKs,
        Experiment::StrongOrder,
        Experiment::MomentScan,
        Experiment::Contractivity,
        Experiment::BiasOrder,
        Experiment::PoissonSolve,
        Experiment::PoissonCheck,
        Experiment::Variance,
        Experiment::Decomposition,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::ErgodicLimit => "ergodic-limit",
            Experiment::CltTable => "clt-table",
            Experiment::Deviations => "deviations",
            Experiment::CltKs => "clt-ks",
            Experiment::StrongOrder => "strong-order",
            Experiment::MomentScan => "moment-scan",
            Experiment::Contractivity => "contractivity",
            Experiment::BiasOrder => "bias-order",
            Experiment::PoissonSolve => "poisson-solve",
            Experiment::PoissonCheck => "poisson-check",
            Experiment::Variance => "variance",
            Experiment::Decomposition => "decomposition",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown experiment '{s}'")))
    }
}

/// One experiment, fully specified. Keys absent from the file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub model: String,
    /// observable averaged along paths
    pub h: String,
    /// function applied to the deviation statistic
    pub f: String,
    pub tau: f64,
    /// descending step sizes for sweeps; empty means `[tau]`
    pub taus: Vec<f64>,
    /// fine step for reference quantities
    pub tau_ref: f64,
    pub alpha: f64,
    pub n_paths: usize,
    pub x0: f64,
    /// initial values for the ergodic limit; empty means `[x0]`
    pub x0_list: Vec<f64>,
    pub y0: f64,
    pub horizon: f64,
    pub seed: u64,
    /// exact `pi(h)` when known; otherwise it is estimated
    pub pi_h: Option<f64>,
    /// paths per initial value for the `pi(h)` reference
    pub ref_paths: usize,
    /// horizon of the `pi(h)` reference
    pub ref_horizon: f64,
    pub grid_a: f64,
    pub grid_b: f64,
    pub n_grid: usize,
    pub t_trunc: f64,
    pub quad_tau: f64,
    pub n_inner_paths: usize,
    pub variational_gradient: bool,
    /// long-trajectory steps for the ergodic variance estimator
    pub n_steps: u64,
    pub burn_in: u64,
    /// reference variance for KS checks; otherwise it is estimated
    pub ref_variance: Option<f64>,
    pub p_list: Vec<u32>,
    /// keep every k-th step in long per-step CSVs
    pub record_every: u64,
    /// precomputed Poisson table (CSV) to use instead of solving
    pub table: Option<String>,
    /// output directory (not part of the provenance record)
    pub out: Option<String>,
    /// worker count (not part of the provenance record)
    pub workers: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            model: "example51".into(),
            h: "sin_plus_one".into(),
            f: "cos".into(),
            tau: 0.01,
            taus: Vec::new(),
            tau_ref: 2f64.powi(-10),
            alpha: 2.0,
            n_paths: 2000,
            x0: 1.0,
            x0_list: Vec::new(),
            y0: -2.0,
            horizon: 10.0,
            seed: 1,
            pi_h: None,
            ref_paths: 2000,
            ref_horizon: 10.0,
            grid_a: -3.0,
            grid_b: 3.0,
            n_grid: 301,
            t_trunc: 3.0,
            quad_tau: 0.0025,
            n_inner_paths: 10_000,
            variational_gradient: false,
            n_steps: 100_000,
            burn_in: 1000,
            ref_variance: None,
            p_list: vec![2, 4, 8],
            record_every: 100,
            table: None,
            out: None,
            workers: None,
        }
    }
}

/// Parse a right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Build a config from file text plus `key=value` overrides (later wins).
    pub fn from_parts(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match text {
            Some(t) => t.parse::<toml::Table>().map_err(|e| Error::config(format!("config parse error: {e}")))?,
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::config(format!("config must be flat; '{k}' is a section")));
        }
        for (k, v) in overrides {
            let mut value = parse_value(v);
            // integers are accepted where reals are expected
            if let toml::Value::Integer(i) = value {
                if is_real_key(k) {
                    value = toml::Value::Float(i as f64);
                }
            }
            if let toml::Value::Array(items) = &mut value {
                if is_real_key(k) {
                    for it in items.iter_mut() {
                        if let toml::Value::Integer(i) = *it {
                            *it = toml::Value::Float(i as f64);
                        }
                    }
                }
            }
            table.insert(k.trim().to_string(), value);
        }
        for (k, v) in table.iter_mut() {
            if is_real_key(k) {
                promote_integers(v);
            }
        }
        toml::Value::Table(table)
            .try_into::<ExperimentConfig>()
            .map_err(|e| Error::config(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_parts(Some(&text), overrides)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.experiment.ok_or_else(|| Error::config("no experiment selected"))
    }

    /// Step sizes of a sweep, defaulting to `[tau]`.
    pub fn tau_list(&self) -> Vec<f64> {
        if self.taus.is_empty() {
            vec![self.tau]
        } else {
            self.taus.clone()
        }
    }

    pub fn initial_values(&self) -> Vec<Vec<f64>> {
        if self.x0_list.is_empty() {
            vec![vec![self.x0]]
        } else {
            self.x0_list.iter().map(|&x| vec![x]).collect()
        }
    }

    /// Config with the run-local keys (`out`, `workers`) removed, as embedded
    /// in output metadata.
    pub fn provenance(&self) -> ExperimentConfig {
        ExperimentConfig { out: None, workers: None, ..self.clone() }
    }

    /// Check the numeric fields against the preconditions of the selected
    /// experiment before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        let e = self.experiment()?;
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        for &t in &self.tau_list() {
            positive("tau", t)?;
        }
        positive("tau_ref", self.tau_ref)?;
        positive("horizon", self.horizon)?;
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be positive"));
        }
        if matches!(e, Experiment::CltTable | Experiment::Deviations | Experiment::CltKs)
            && !(self.alpha > 1.0 && self.alpha <= 2.0)
        {
            return Err(Error::config(format!(
                "alpha must lie in the admissible range (1, 2], got {}",
                self.alpha
            )));
        }
        if self.taus.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::config(format!("taus must be strictly descending, got {:?}", self.taus)));
        }
        if matches!(e, Experiment::PoissonSolve | Experiment::PoissonCheck | Experiment::Variance | Experiment::Decomposition)
        {
            positive("t_trunc", self.t_trunc)?;
            positive("quad_tau", self.quad_tau)?;
            if !(self.grid_a < self.grid_b) || self.n_grid < 3 {
                return Err(Error::config("grid needs grid_a < grid_b and n_grid >= 3"));
            }
        }
        if let Some(w) = &self.workers {
            w.parse::<crate::parallel::Workers>()?;
        }
        Ok(())
    }
}

fn is_real_key(k: &str) -> bool {
    matches!(
        k.trim(),
        "tau" | "taus" | "tau_ref" | "alpha" | "x0" | "x0_list" | "y0" | "horizon" | "pi_h" | "ref_horizon"
            | "grid_a" | "grid_b" | "t_trunc" | "quad_tau" | "ref_variance"
    )
}

fn promote_integers(v: &mut toml::Value) {
    match v {
        toml::Value::Integer(i) => *v = toml::Value::Float(*i as f64),
        toml::Value::Array(items) => items.iter_mut().for_each(promote_integers),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides() {
        let text = "experiment = \"clt-table\"\nmodel = \"example51\"\ntaus = [0.05, 0.02]\nn_paths = 100\nx0 = 1\n";
        let cfg = ExperimentConfig::from_parts(Some(text), &[("n_paths".into(), "50".into()), ("h".into(), "x4".into())])
            .unwrap();
        assert_eq!(cfg.experiment, Some(Experiment::CltTable));
        assert_eq!(cfg.n_paths, 50);
        assert_eq!(cfg.h, "x4");
        assert_eq!(cfg.taus, vec![0.05, 0.02]);
        assert_eq!(cfg.x0, 1.0);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(ExperimentConfig::from_parts(Some("nonsense = 1"), &[]).is_err());
        assert!(ExperimentConfig::from_parts(Some("[section]\nx = 1"), &[]).is_err());
    }

    #[test]
    fn alpha_range_is_validated() {
        let cfg = ExperimentConfig::from_parts(None, &[
            ("experiment".into(), "clt-table".into()),
            ("alpha".into(), "0.5".into()),
        ])
        .unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("(1, 2]"), "{msg}");
    }

    #[test]
    fn provenance_drops_run_local_keys() {
        let mut cfg = ExperimentConfig { out: Some("x".into()), workers: Some("4".into()), ..Default::default() };
        cfg = cfg.provenance();
        assert!(cfg.out.is_none() && cfg.workers.is_none());
    }
}
