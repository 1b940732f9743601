//! Single-experiment execution and artifact writing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Experiment, ExperimentConfig};
use crate::ergodic::{
    clt_csv, clt_table, estimate_ergodic_limit, invariant_bias_order, n_steps_for, sample_deviations,
    ErgodicLimitEstimate,
};
use crate::error::Result;
use crate::integrator::{contraction_profile_with_errors, moment_profile, strong_error_profile, BemConfig};
use crate::model::{builtin_model, builtin_test_function, SdeModel, TestFunction};
use crate::parallel::{with_workers, Workers};
use crate::poisson::{
    asymptotic_variance, clt_decomposition, poisson_residual, predictable_variation, solve_phi, variance_grid_quadrature,
    GridSpec, PhiSettings, PoissonTable,
};
use crate::rng::sub_seed;
use crate::stats::{fit_order, ks_to_normal, mean_stderr, plateau_check, sample_variance};

/// Build identifier recorded in every metadata file.
pub const BUILD_ID: &str = env!("ERGODIC_BEM_BUILD_ID");

/// Seed tags for the sub-experiments of one run.
const TAG_PI_H: u64 = 101;
const TAG_TABLE: u64 = 202;
const TAG_VARIANCE: u64 = 303;

/// Result of one experiment: the CSV body plus machine-readable metadata.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub csv: String,
    pub metadata: Value,
    pub files: Vec<PathBuf>,
}

struct Parts {
    csv: String,
    result: Value,
    resolved: Value,
    warnings: Vec<String>,
}

fn model_of(cfg: &ExperimentConfig) -> Result<SdeModel> {
    builtin_model(&cfg.model)
}

/// `pi(h)`: exact when configured, otherwise a long-horizon estimate at `tau_ref`.
fn reference_limit(cfg: &ExperimentConfig, model: &SdeModel, h: &TestFunction) -> Result<ErgodicLimitEstimate> {
    match cfg.pi_h {
        Some(v) => Ok(ErgodicLimitEstimate::exact(v)),
        None => estimate_ergodic_limit(
            model,
            &BemConfig::new(cfg.tau_ref),
            h,
            &cfg.initial_values(),
            cfg.ref_horizon,
            cfg.ref_paths,
            sub_seed(cfg.seed, TAG_PI_H),
        ),
    }
}

fn poisson_table(cfg: &ExperimentConfig, model: &SdeModel, h: &TestFunction, pi_h: f64) -> Result<PoissonTable> {
    if let Some(path) = &cfg.table {
        return PoissonTable::read_csv(Path::new(path));
    }
    let grid = GridSpec::new(cfg.grid_a, cfg.grid_b, cfg.n_grid)?;
    let settings = PhiSettings {
        t_trunc: cfg.t_trunc,
        quad_tau: cfg.quad_tau,
        n_inner_paths: cfg.n_inner_paths,
        master_seed: sub_seed(cfg.seed, TAG_TABLE),
        variational_gradient: cfg.variational_gradient,
    };
    solve_phi(model, h, pi_h, &grid, &settings)
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn execute(cfg: &ExperimentConfig) -> Result<Parts> {
    let experiment = cfg.experiment()?;
    let model = model_of(cfg)?;
    let h = builtin_test_function(&cfg.h)?;
    let mut warnings = model.warnings();
    let base = BemConfig::new(cfg.tau);
    let x0 = [cfg.x0];
    let mut csv = String::new();

    let (result, resolved) = match experiment {
        Experiment::ErgodicLimit => {
            let est =
                estimate_ergodic_limit(&model, &base, &h, &cfg.initial_values(), cfg.horizon, cfg.n_paths, cfg.seed)?;
            csv.push_str("x0,value,stderr,n_paths\n");
            for e in &est.per_initial {
                let _ = writeln!(csv, "{},{},{},{}", e.x0[0], e.value, e.stderr, cfg.n_paths);
            }
            let _ = writeln!(csv, "all,{},{},{}", est.value, est.stderr, est.n_paths);
            let n = (cfg.horizon / cfg.tau).round() as u64;
            (to_value(&est), json!({ "n_steps": n }))
        }
        Experiment::CltTable => {
            let f = builtin_test_function(&cfg.f)?;
            let pi = reference_limit(cfg, &model, &h)?;
            let (rows, batches) =
                clt_table(&model, &base, &h, &f, cfg.alpha, &cfg.tau_list(), &x0, cfg.n_paths, &pi, cfg.seed)?;
            csv = clt_csv(&rows);
            let resolved: Vec<Value> = batches
                .iter()
                .map(|b| {
                    json!({
                        "tau": b.tau, "N": b.n_steps_used, "tau_pow_neg_alpha": b.tau_pow_neg_alpha,
                        "systematic_shift": b.systematic_shift, "solver": to_value(&b.solver),
                    })
                })
                .collect();
            (json!({ "rows": to_value(&rows), "pi_h": to_value(&pi) }), Value::Array(resolved))
        }
        Experiment::Deviations => {
            let pi = reference_limit(cfg, &model, &h)?;
            let b = sample_deviations(&model, &base, &h, &x0, cfg.alpha, cfg.n_paths, &pi, cfg.seed)?;
            csv.push_str("path,z\n");
            for (i, z) in b.samples.iter().enumerate() {
                let _ = writeln!(csv, "{i},{z}");
            }
            let (mean, stderr) = mean_stderr(&b.samples);
            (
                json!({ "mean": mean, "stderr": stderr, "variance": sample_variance(&b.samples), "pi_h": to_value(&pi) }),
                json!({ "N": b.n_steps_used, "tau_pow_neg_alpha": b.tau_pow_neg_alpha,
                        "systematic_shift": b.systematic_shift, "solver": to_value(&b.solver) }),
            )
        }
        Experiment::CltKs => {
            let pi = reference_limit(cfg, &model, &h)?;
            let variance = match cfg.ref_variance {
                Some(v) => v,
                None => {
                    let table = poisson_table(cfg, &model, &h, pi.value)?;
                    let v = asymptotic_variance(
                        &model,
                        &table,
                        &BemConfig::new(cfg.tau_ref),
                        cfg.x0,
                        cfg.n_steps,
                        cfg.burn_in,
                        sub_seed(cfg.seed, TAG_VARIANCE),
                    )?;
                    if v.clamped_steps > 0 {
                        warnings.push(format!("{} trajectory states clamped to the table grid", v.clamped_steps));
                    }
                    v.value
                }
            };
            csv.push_str("tau,alpha,n_paths,N_steps,ks_statistic,threshold,reference_variance,sample_variance,passed\n");
            let mut reports = Vec::new();
            for tau in cfg.tau_list() {
                let b = sample_deviations(&model, &base.with_tau(tau), &h, &x0, cfg.alpha, cfg.n_paths, &pi, cfg.seed)?;
                let ks = ks_to_normal(&b.samples, variance)?;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    tau,
                    cfg.alpha,
                    cfg.n_paths,
                    b.n_steps_used,
                    ks.statistic,
                    ks.pass_threshold,
                    variance,
                    sample_variance(&b.samples),
                    ks.passed()
                );
                reports.push(to_value(&ks));
            }
            (json!({ "ks": reports, "pi_h": to_value(&pi) }), json!({ "reference_variance": variance }))
        }
        Experiment::StrongOrder => {
            let taus = cfg.tau_list();
            let pts = strong_error_profile(&model, &base, &taus, cfg.tau_ref, cfg.horizon, &x0, cfg.n_paths, cfg.seed)?;
            csv.push_str("tau,rms_sup,t_at_sup,ratio\n");
            for p in &pts {
                let _ = writeln!(csv, "{},{},{},{}", p.tau, p.rms_sup, p.t_at_sup, p.ratio);
            }
            let fit = if pts.len() >= 3 {
                fit_order(&pts.iter().map(|p| (p.tau, p.rms_sup)).collect::<Vec<_>>()).ok()
            } else {
                None
            };
            (json!({ "points": to_value(&pts), "fit": to_value(&fit) }), json!({ "n_ref": (cfg.horizon / cfg.tau_ref).round() }))
        }
        Experiment::MomentScan => {
            let profile = moment_profile(&model, &base, &x0, cfg.n_steps, &cfg.p_list, cfg.n_paths, cfg.seed)?;
            csv.push_str("step,time,p,moment\n");
            let every = cfg.record_every.max(1) as usize;
            for (p, values) in cfg.p_list.iter().zip(&profile) {
                for (n, v) in values.iter().enumerate().step_by(every) {
                    let _ = writeln!(csv, "{n},{},{p},{v}", n as f64 * cfg.tau);
                }
            }
            let checks: Vec<Value> = cfg
                .p_list
                .iter()
                .zip(&profile)
                .map(|(p, v)| json!({ "p": p, "check": to_value(&plateau_check(v, 0.25, 1e-6)) }))
                .collect();
            (Value::Array(checks), json!({ "n_steps": cfg.n_steps }))
        }
        Experiment::Contractivity => {
            let n = (cfg.horizon / cfg.tau).round() as u64;
            let p = contraction_profile_with_errors(&model, &base, &x0, &[cfg.y0], n, cfg.n_paths, cfg.seed)?;
            csv.push_str("step,time,mean_sq_diff\n");
            let every = cfg.record_every.max(1) as usize;
            for (k, v) in p.mean_sq.iter().enumerate().step_by(every) {
                let _ = writeln!(csv, "{k},{},{v}", k as f64 * cfg.tau);
            }
            let last = *p.mean_sq.last().unwrap_or(&f64::NAN);
            (
                json!({
                    "monotone": p.is_monotone(),
                    "significant_increases": p.significant_increases(3.0),
                    "final": last,
                    "initial": p.mean_sq[0],
                }),
                json!({ "n_steps": n }),
            )
        }
        Experiment::BiasOrder => {
            let f = builtin_test_function(&cfg.f)?;
            let r = invariant_bias_order(
                &model,
                &base,
                &f,
                &cfg.tau_list(),
                cfg.tau_ref,
                &x0,
                cfg.horizon,
                cfg.n_paths,
                cfg.seed,
            )?;
            csv.push_str("tau,estimate,stderr,bias,bias_stderr,resolved\n");
            for p in &r.points {
                let _ = writeln!(csv, "{},{},{},{},{},{}", p.tau, p.estimate, p.stderr, p.bias, p.bias_stderr, p.resolved);
            }
            if r.c1_hat <= 0.0 {
                warnings.push("non-positive dissipativity estimate".into());
            }
            (to_value(&r), json!({ "burn_in_time": r.burn_in_time }))
        }
        Experiment::PoissonSolve => {
            let pi = reference_limit(cfg, &model, &h)?;
            let table = poisson_table(cfg, &model, &h, pi.value)?;
            csv = table.to_csv();
            warnings.push("decay rate of the time integral proxied by the dissipativity constant".into());
            (
                json!({ "pi_h": to_value(&pi), "gradient_check": to_value(&table.gradient_check()),
                        "truncation_bound": table.truncation_bound }),
                json!({ "t_trunc": table.t_trunc, "quad_tau": table.quad_tau }),
            )
        }
        Experiment::PoissonCheck => {
            let pi = reference_limit(cfg, &model, &h)?;
            let table = poisson_table(cfg, &model, &h, pi.value)?;
            let r = poisson_residual(&table, &model, &h, pi.value)?;
            csv.push_str("x,residual\n");
            for (x, v) in &r.residuals {
                let _ = writeln!(csv, "{x},{v}");
            }
            (
                json!({ "max_abs": r.max_abs, "at_x": r.at_x, "h_scale": r.h_scale, "relative": r.relative(),
                        "pi_h": to_value(&pi) }),
                json!({ "t_trunc": table.t_trunc, "quad_tau": table.quad_tau }),
            )
        }
        Experiment::Variance => {
            let pi = reference_limit(cfg, &model, &h)?;
            let table = poisson_table(cfg, &model, &h, pi.value)?;
            let mut estimates = vec![asymptotic_variance(
                &model,
                &table,
                &base,
                cfg.x0,
                cfg.n_steps,
                cfg.burn_in,
                sub_seed(cfg.seed, TAG_VARIANCE),
            )?];
            if let Ok(q) = variance_grid_quadrature(&model, &table) {
                estimates.push(q);
            }
            estimates.push(predictable_variation(&model, &table, &base, cfg.x0, cfg.n_paths, cfg.seed)?);
            csv.push_str("method,value,stderr,clamped_steps,n_samples\n");
            for e in &estimates {
                let method = serde_json::to_value(e.method).ok().and_then(|v| v.as_str().map(str::to_string));
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    method.unwrap_or_default(),
                    e.value,
                    e.stderr,
                    e.clamped_steps,
                    e.n_samples
                );
                if e.clamped_steps > 0 {
                    warnings.push(format!("{} states clamped to the table grid", e.clamped_steps));
                }
            }
            (json!({ "estimates": to_value(&estimates), "pi_h": to_value(&pi) }), json!({ "n_steps": cfg.n_steps }))
        }
        Experiment::Decomposition => {
            let pi = reference_limit(cfg, &model, &h)?;
            let table = poisson_table(cfg, &model, &h, pi.value)?;
            csv.push_str("tau,path,z,h,r\n");
            let mut summary = Vec::new();
            for tau in cfg.tau_list() {
                n_steps_for(tau, 2.0)?;
                let d = clt_decomposition(&model, &table, &base.with_tau(tau), &h, pi.value, cfg.x0, cfg.n_paths, cfg.seed)?;
                for (i, ((z, hh), r)) in d.z_samples.iter().zip(&d.h_samples).zip(&d.r_samples).enumerate() {
                    let _ = writeln!(csv, "{tau},{i},{z},{hh},{r}");
                }
                summary.push(json!({
                    "tau": tau, "m": d.m, "mean_abs_r": d.mean_abs_r(), "var_h": d.var_h(),
                    "max_identity_gap": d.max_identity_gap(), "clamped_steps": d.clamped_steps,
                }));
            }
            (json!({ "per_tau": summary, "pi_h": to_value(&pi) }), Value::Null)
        }
    };
    Ok(Parts { csv, result, resolved, warnings })
}

/// Validate, run and (when `out` is set) write `<experiment>.csv` and
/// `<experiment>.json`. The CSV depends only on the provenance config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let experiment = cfg.experiment()?;
    let workers = match &cfg.workers {
        Some(w) => w.parse()?,
        None => Workers::from_env()?,
    };
    let parts = with_workers(workers, || execute(cfg))??;
    let metadata = json!({
        "experiment": experiment.as_str(),
        "build": BUILD_ID,
        "config": to_value(&cfg.provenance()),
        "seed": cfg.seed,
        "solver_settings": to_value(&BemConfig::new(cfg.tau)),
        "resolved": parts.resolved,
        "warnings": parts.warnings,
        "result": parts.result,
    });
    let mut files = Vec::new();
    if let Some(dir) = &cfg.out {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{experiment}.csv"));
        let json_path = dir.join(format!("{experiment}.json"));
        std::fs::write(&csv_path, &parts.csv)?;
        std::fs::write(&json_path, serde_json::to_string_pretty(&metadata)?)?;
        files.push(csv_path);
        files.push(json_path);
    }
    Ok(RunOutput { experiment, csv: parts.csv, metadata, files })
}
