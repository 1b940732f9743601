//! Named property suites with one verdict per criterion.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Experiment, ExperimentConfig};
use super::run::run;
use crate::ergodic::{clt_table, estimate_ergodic_limit, sample_deviations, ErgodicLimitEstimate};
use crate::error::{Error, Result};
use crate::integrator::{contraction_profile_with_errors, moment_profile, strong_error_profile, BemConfig};
use crate::model::{builtin_test_function, SdeModel};
use crate::poisson::{
    asymptotic_variance, clt_decomposition, poisson_residual, predictable_variation, solve_phi, GridSpec, PhiSettings,
    PoissonTable,
};
use crate::rng::sub_seed;
use crate::stats::{fit_order, ks_to_normal, plateau_check};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Properties,
    PaperFigures,
    PaperTables,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "properties" => Ok(Suite::Properties),
            "paper-figures" => Ok(Suite::PaperFigures),
            "paper-tables" => Ok(Suite::PaperTables),
            other => Err(Error::config(format!(
                "unknown suite '{other}' (expected properties, paper-figures or paper-tables)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Properties => "properties",
            Suite::PaperFigures => "paper-figures",
            Suite::PaperTables => "paper-tables",
        })
    }
}

/// Scale of a suite run. `Desk` finishes in minutes on one core; `Full` uses
/// 5000 paths and the finest reference step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::config(format!("unknown profile '{other}' (expected desk or full)"))),
        }
    }
}

impl Profile {
    fn paths(self) -> usize {
        match self {
            Profile::Desk => 2000,
            Profile::Full => 5000,
        }
    }

    fn fine_tau(self) -> f64 {
        match self {
            Profile::Desk => 2f64.powi(-10),
            Profile::Full => 2f64.powi(-14),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: Value,
}

impl CriterionResult {
    fn new(id: u32, name: &str, passed: bool, detail: String, metrics: Value) -> Self {
        Self { id, name: name.into(), passed, detail, metrics }
    }

    fn failed(id: u32, name: &str, err: &Error) -> Self {
        Self::new(id, name, false, format!("error: {err}"), Value::Null)
    }

    pub fn line(&self) -> String {
        format!("[{}] {:>2} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub profile: Profile,
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

fn guard(id: u32, name: &str, f: impl FnOnce() -> Result<CriterionResult>) -> CriterionResult {
    f().unwrap_or_else(|e| CriterionResult::failed(id, name, &e))
}

fn sin_plus_one_limit(profile: Profile, seed: u64) -> Result<ErgodicLimitEstimate> {
    let m = SdeModel::example51();
    let h = builtin_test_function("sin_plus_one")?;
    estimate_ergodic_limit(&m, &BemConfig::new(profile.fine_tau()), &h, &[vec![-2.0], vec![1.0]], 10.0, profile.paths(), seed)
}

/// Ergodic limits of example51 for `sin(x) + 1` (1) and `x^4` (0).
pub fn ergodic_limits_example51(profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "ergodic limits, example51";
    guard(1, NAME, || {
        let m = SdeModel::example51();
        let cfg = BemConfig::new(profile.fine_tau());
        let mut ok = true;
        let mut detail = Vec::new();
        let mut metrics = Vec::new();
        for (id, target) in [("sin_plus_one", 1.0), ("x4", 0.0)] {
            let h = builtin_test_function(id)?;
            let est = estimate_ergodic_limit(&m, &cfg, &h, &[vec![-2.0], vec![1.0]], 10.0, profile.paths(), seed)?;
            let good = (est.value - target).abs() <= 0.02;
            ok &= good;
            detail.push(format!("{id}: {:.6} (target {target}, gap {:.2} se)", est.value, est.max_gap_in_stderr));
            metrics.push(json!({ "h": id, "value": est.value, "stderr": est.stderr, "max_gap": est.max_gap_in_stderr }));
        }
        Ok(CriterionResult::new(1, NAME, ok, detail.join("; "), Value::Array(metrics)))
    })
}

/// Ergodic limit of example52 for `x^5` (0) from three initial values.
pub fn ergodic_limit_example52(profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "ergodic limit, example52";
    guard(2, NAME, || {
        let m = SdeModel::example52();
        let h = builtin_test_function("x5")?;
        let x0s = [vec![-2.0], vec![0.5], vec![2.0]];
        let est = estimate_ergodic_limit(&m, &BemConfig::new(profile.fine_tau()), &h, &x0s, 10.0, profile.paths(), seed)?;
        let ok = est.value.abs() <= 0.02;
        Ok(CriterionResult::new(
            2,
            NAME,
            ok,
            format!("x5: {:.6} (target 0, gap {:.2} se)", est.value, est.max_gap_in_stderr),
            json!({ "value": est.value, "stderr": est.stderr }),
        ))
    })
}

fn nondecreasing_within(means: &[f64], ses: &[f64], k: f64) -> bool {
    (1..means.len()).all(|i| means[i] >= means[i - 1] - k * (ses[i] * ses[i] + ses[i - 1] * ses[i - 1]).sqrt())
}

/// `E cos Z` at tau = 0.05 near 0.9993475 and nondecreasing as tau shrinks;
/// the `sin(x^6)` row positive and nonincreasing.
pub fn clt_table_anchor(profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "CLT table anchor and trend";
    guard(3, NAME, || {
        let m = SdeModel::example51();
        let h = builtin_test_function("sin_plus_one")?;
        let pi = sin_plus_one_limit(profile, sub_seed(seed, 1))?;
        let taus = [0.05, 0.03, 0.02, 0.01];
        let base = BemConfig::new(0.05);
        let cos = builtin_test_function("cos")?;
        let (rows, _) = clt_table(&m, &base, &h, &cos, 2.0, &taus, &[1.0], profile.paths(), &pi, seed)?;
        let means: Vec<f64> = rows.iter().map(|r| r.f_mean).collect();
        let ses: Vec<f64> = rows.iter().map(|r| r.f_stderr).collect();
        let anchor_ok = (means[0] - 0.9993475).abs() <= 0.004;
        let trend_ok = nondecreasing_within(&means, &ses, 2.0);
        let sin6 = builtin_test_function("sin_x6")?;
        let (rows6, _) = clt_table(&m, &base, &h, &sin6, 2.0, &taus, &[1.0], profile.paths(), &pi, seed)?;
        let m6: Vec<f64> = rows6.iter().map(|r| r.f_mean).collect();
        let s6: Vec<f64> = rows6.iter().map(|r| r.f_stderr).collect();
        let neg6: Vec<f64> = m6.iter().map(|v| -v).collect();
        let sin6_ok = m6.iter().all(|&v| v > 0.0) && nondecreasing_within(&neg6, &s6, 2.0);
        let ok = anchor_ok && trend_ok && sin6_ok;
        Ok(CriterionResult::new(
            3,
            NAME,
            ok,
            format!(
                "E cos Z = {:?}; anchor {:.7} vs 0.9993475; trend {}; sin(x^6) row {:?}",
                means, means[0], trend_ok, m6
            ),
            json!({ "cos": means, "cos_stderr": ses, "sin_x6": m6 }),
        ))
    })
}

/// Fitted RMS self-convergence slope of example51 in [0.4, 0.8], r^2 > 0.95.
pub fn strong_order(_profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "strong self-convergence order";
    guard(4, NAME, || {
        let m = SdeModel::example51();
        let taus: Vec<f64> = (6..=10).map(|k| 2f64.powi(-k)).collect();
        let pts = strong_error_profile(&m, &BemConfig::new(taus[0]), &taus, 2f64.powi(-13), 4.0, &[1.0], 500, seed)?;
        let fit = fit_order(&pts.iter().map(|p| (p.tau, p.rms_sup)).collect::<Vec<_>>())?;
        let ok = (0.4..=0.8).contains(&fit.slope) && fit.r_squared > 0.95;
        Ok(CriterionResult::new(
            4,
            NAME,
            ok,
            format!("slope {:.4} (band [0.4, 0.8]), r^2 {:.4}", fit.slope, fit.r_squared),
            json!({ "slope": fit.slope, "r_squared": fit.r_squared }),
        ))
    })
}

/// Plateau of the running moments `E|X_n|^p`, p in {2, 4, 8}, for `model`.
pub fn moment_plateau_for(model: &SdeModel, seed: u64) -> CriterionResult {
    const NAME: &str = "uniform moment plateau";
    guard(5, NAME, || {
        let p_list = [2, 4, 8];
        let profile = moment_profile(model, &BemConfig::new(0.01), &[1.0], 100_000, &p_list, 500, seed)?;
        let checks: Vec<_> = profile.iter().map(|v| plateau_check(v, 0.25, 1e-6)).collect();
        let ok = checks.iter().all(|c| c.passed);
        let detail = p_list
            .iter()
            .zip(&checks)
            .map(|(p, c)| {
                format!("p={p}: sup {:.3e} vs {:.3e}, slope {:.1e}", c.sup_last_half, c.sup_second_quarter, c.slope_last_half)
            })
            .collect::<Vec<_>>()
            .join("; ");
        Ok(CriterionResult::new(5, NAME, ok, detail, serde_json::to_value(&checks).unwrap_or(Value::Null)))
    })
}

pub fn moment_plateau(_profile: Profile, seed: u64) -> CriterionResult {
    moment_plateau_for(&SdeModel::example51(), seed)
}

/// `E|X_n - Y_n|^2` from (2, -2) nonincreasing and below 16e-4 by T = 2.
/// An increase of the sample mean counts against monotonicity when it
/// exceeds 3 standard errors of the one-step change.
pub fn contractivity(_profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "contractivity";
    guard(6, NAME, || {
        let m = SdeModel::example51();
        let p = contraction_profile_with_errors(&m, &BemConfig::new(0.01), &[2.0], &[-2.0], 200, 500, seed)?;
        let raw = p.is_monotone();
        let bad = p.significant_increases(3.0);
        let last = p.mean_sq[p.mean_sq.len() - 1];
        let ok = bad.is_empty() && last < 1e-4 * 16.0;
        Ok(CriterionResult::new(
            6,
            NAME,
            ok,
            format!(
                "significant increases at steps {bad:?} (sample mean monotone: {raw}); E|diff|^2 at T=2: {last:.3e} (bound 1.6e-3)"
            ),
            json!({ "significant_increases": bad, "sample_monotone": raw, "final": last }),
        ))
    })
}

/// OU oracles: `phi(1) = -1/8`, variance `1/64`, KS of Z against N(0, 1/64).
pub fn ou_poisson_oracle(_profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "Poisson machinery on OU";
    guard(7, NAME, || {
        let m = SdeModel::ornstein_uhlenbeck(8.0, 1.0)?;
        let h = builtin_test_function("x")?;
        let grid = GridSpec::new(-2.0, 2.0, 81)?;
        let settings = PhiSettings {
            t_trunc: 1.5,
            quad_tau: 2f64.powi(-11),
            n_inner_paths: 100,
            master_seed: sub_seed(seed, 1),
            variational_gradient: false,
        };
        let table = solve_phi(&m, &h, 0.0, &grid, &settings)?;
        let (phi1, _) = table.phi_at(1.0);
        let phi_ok = (phi1 + 0.125).abs() <= 1e-3;
        let v = asymptotic_variance(&m, &table, &BemConfig::new(0.01), 0.0, 100_000, 1000, sub_seed(seed, 2))?;
        let var_ok = (v.value - 1.0 / 64.0).abs() <= 3.0 * v.stderr + 1e-3;
        let b = sample_deviations(&m, &BemConfig::new(0.02), &h, &[0.0], 2.0, 2000, &ErgodicLimitEstimate::exact(0.0), seed)?;
        let ks = ks_to_normal(&b.samples, 1.0 / 64.0)?;
        let ks_ok = ks.statistic < 0.05;
        Ok(CriterionResult::new(
            7,
            NAME,
            phi_ok && var_ok && ks_ok,
            format!("phi(1) = {phi1:.6}; variance {:.6} +- {:.1e}; KS {:.4}", v.value, v.stderr, ks.statistic),
            json!({ "phi1": phi1, "variance": v.value, "variance_stderr": v.stderr, "ks": ks.statistic }),
        ))
    })
}

/// Settings of the example51 Poisson table used by criteria 8 and 9.
pub fn example51_phi_settings(seed: u64) -> PhiSettings {
    PhiSettings { t_trunc: 3.0, quad_tau: 0.0025, n_inner_paths: 10_000, master_seed: seed, variational_gradient: false }
}

/// Residual of the Poisson equation for example51, `h = sin(x) + 1`.
/// Returns the table for reuse.
pub fn poisson_residual_check(profile: Profile, seed: u64) -> (CriterionResult, Option<(PoissonTable, f64)>) {
    const NAME: &str = "Poisson residual, example51";
    let mut kept = None;
    let result = guard(8, NAME, || {
        let m = SdeModel::example51();
        let h = builtin_test_function("sin_plus_one")?;
        let pi = sin_plus_one_limit(profile, sub_seed(seed, 1))?;
        let grid = GridSpec::new(-3.0, 3.0, 301)?;
        let table = solve_phi(&m, &h, pi.value, &grid, &example51_phi_settings(sub_seed(seed, 2)))?;
        let r = poisson_residual(&table, &m, &h, pi.value)?;
        let ok = r.max_abs < 0.05 * r.h_scale;
        kept = Some((table, pi.value));
        Ok(CriterionResult::new(
            8,
            NAME,
            ok,
            format!("max residual {:.4} at x = {:.2}; bound 0.05 * {:.4}", r.max_abs, r.at_x, r.h_scale),
            json!({ "max_abs": r.max_abs, "h_scale": r.h_scale }),
        ))
    });
    (result, kept)
}

/// `Z = H + R` on example51: mean |R| shrinks with tau, the identity holds
/// per path, and `Var(H)` is within 30% of the predictable variation.
pub fn decomposition_check(profile: Profile, seed: u64, table: Option<(PoissonTable, f64)>) -> CriterionResult {
    const NAME: &str = "martingale/remainder decomposition";
    guard(9, NAME, || {
        let m = SdeModel::example51();
        let h = builtin_test_function("sin_plus_one")?;
        let (table, pi_h) = match table {
            Some(t) => t,
            None => {
                let pi = sin_plus_one_limit(profile, sub_seed(seed, 1))?;
                let grid = GridSpec::new(-3.0, 3.0, 301)?;
                (solve_phi(&m, &h, pi.value, &grid, &example51_phi_settings(sub_seed(seed, 2)))?, pi.value)
            }
        };
        let mut mean_r = Vec::new();
        let mut ok = true;
        let mut detail = Vec::new();
        for tau in [0.05, 0.02] {
            let cfg = BemConfig::new(tau);
            let d = clt_decomposition(&m, &table, &cfg, &h, pi_h, 1.0, 1000, seed)?;
            let pv = predictable_variation(&m, &table, &cfg, 1.0, 1000, sub_seed(seed, 3))?;
            let var_h = d.var_h();
            let rel = (var_h - pv.value).abs() / pv.value;
            ok &= d.max_identity_gap() <= 1e-10 && rel <= 0.3;
            mean_r.push(d.mean_abs_r());
            detail.push(format!("tau {tau}: mean|R| {:.4e}, Var H {:.3e} vs {:.3e} ({:.1}%)", d.mean_abs_r(), var_h, pv.value, 100.0 * rel));
        }
        ok &= mean_r[1] < mean_r[0];
        Ok(CriterionResult::new(9, NAME, ok, detail.join("; "), json!({ "mean_abs_r": mean_r })))
    })
}

/// Same config under 1, 2 and 4 workers gives byte-identical CSV.
pub fn determinism(_profile: Profile, seed: u64) -> CriterionResult {
    const NAME: &str = "determinism across worker counts";
    guard(10, NAME, || {
        let configs = [
            ExperimentConfig {
                experiment: Some(Experiment::CltTable),
                taus: vec![0.05, 0.02],
                n_paths: 200,
                pi_h: Some(1.0),
                seed,
                ..Default::default()
            },
            ExperimentConfig {
                experiment: Some(Experiment::ErgodicLimit),
                model: "example52".into(),
                h: "x5".into(),
                tau: 2f64.powi(-8),
                horizon: 3.0,
                x0_list: vec![-2.0, 0.5, 2.0],
                n_paths: 100,
                seed,
                ..Default::default()
            },
        ];
        let mut identical = true;
        for cfg in &configs {
            let outs: Vec<String> = ["1", "2", "4"]
                .iter()
                .map(|w| run(&ExperimentConfig { workers: Some(w.to_string()), ..cfg.clone() }).map(|o| o.csv))
                .collect::<Result<_>>()?;
            identical &= outs.windows(2).all(|w| w[0] == w[1]);
        }
        Ok(CriterionResult::new(10, NAME, identical, format!("byte-identical CSV: {identical}"), json!(identical)))
    })
}

/// Run one suite. Criterion numbering follows the acceptance list.
pub fn run_suite(suite: Suite, profile: Profile, seed: u64) -> SuiteReport {
    let criteria = match suite {
        Suite::PaperFigures => vec![ergodic_limits_example51(profile, seed), ergodic_limit_example52(profile, seed)],
        Suite::PaperTables => vec![clt_table_anchor(profile, seed)],
        Suite::Properties => {
            let mut v = vec![
                strong_order(profile, seed),
                moment_plateau(profile, seed),
                contractivity(profile, seed),
                ou_poisson_oracle(profile, seed),
            ];
            let (r8, table) = poisson_residual_check(profile, seed);
            v.push(r8);
            v.push(decomposition_check(profile, seed, table));
            v.push(determinism(profile, seed));
            v
        }
    };
    SuiteReport { suite, profile, seed, criteria }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!("paper-tables".parse::<Suite>().unwrap(), Suite::PaperTables);
        assert_eq!("properties".parse::<Suite>().unwrap().to_string(), "properties");
        assert!("tables".parse::<Suite>().is_err());
        assert_eq!("full".parse::<Profile>().unwrap(), Profile::Full);
        assert!("quick".parse::<Profile>().is_err());
    }

    #[test]
    fn trend_tolerance() {
        assert!(nondecreasing_within(&[1.0, 0.99, 1.2], &[0.01, 0.01, 0.01], 2.0));
        assert!(!nondecreasing_within(&[1.0, 0.9], &[0.01, 0.01], 2.0));
    }

    #[test]
    fn contraction_criterion_passes() {
        let r = contractivity(Profile::Desk, 3);
        assert!(r.passed, "{}", r.detail);
        assert!(r.line().starts_with("[PASS]"));
    }
}
