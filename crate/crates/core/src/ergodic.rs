//! Temporal averages, ergodic limits and deviation statistics.
//!
//! For a test function `h` the temporal average over the first `N` BEM states
//! is `Pi = (1/N) sum_{k<N} h(X_k)` with `N = round(tau^-alpha)`, and the
//! deviation statistic is `Z = tau^{-(alpha-1)/2} (Pi - pi(h))`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{BemConfig, PathSimulator, SolverStats};
use crate::model::{estimate_assumptions, SdeModel, TestFunction};
use crate::parallel::map_indexed;
use crate::rng::{derive_stream, sub_seed, GaussianStream};
use crate::stats::{fit_order, mean_stderr, CompensatedSum, OrderFit};

/// `round(tau^-alpha)`, rejecting `alpha` outside (1, 2] and `N < 2`.
pub fn n_steps_for(tau: f64, alpha: f64) -> Result<u64> {
    check_alpha(alpha)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let n = tau.powf(-alpha).round();
    if !(n >= 2.0) || !n.is_finite() {
        return Err(Error::config(format!(
            "tau = {tau} with alpha = {alpha} gives N = {n} < 2 temporal-average terms"
        )));
    }
    Ok(n as u64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::config(format!("alpha must lie in the admissible range (1, 2], got {alpha}")));
    }
    Ok(())
}

/// Deviation scale `tau^{-(alpha-1)/2}`.
#[inline]
pub fn deviation_scale(tau: f64, alpha: f64) -> f64 {
    tau.powf(-(alpha - 1.0) / 2.0)
}

fn check_dim(x0: &[f64], model: &SdeModel) -> Result<()> {
    if x0.len() != model.state_dim() {
        return Err(Error::contract(format!(
            "initial state has dimension {}, model expects {}",
            x0.len(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Average of `h(X_k)` over `k = 0..N-1` along one path; also returns the
/// solver statistics of that path.
pub fn temporal_average_with_stats(
    model: &SdeModel,
    cfg: &BemConfig,
    h: &TestFunction,
    x0: &[f64],
    alpha: f64,
    stream: &mut GaussianStream,
) -> Result<(f64, SolverStats)> {
    let n = n_steps_for(cfg.tau, alpha)?;
    check_dim(x0, model)?;
    let mut sim = PathSimulator::new(model, cfg, x0)?;
    let mut sum = CompensatedSum::new();
    sum.add(h.value(sim.state()));
    for _ in 1..n {
        sim.advance(stream)?;
        sum.add(h.value(sim.state()));
    }
    Ok((sum.value() / n as f64, sim.stats()))
}

/// `Pi_{tau,alpha}(h)` along one path started at `x0`.
pub fn temporal_average(
    model: &SdeModel,
    cfg: &BemConfig,
    h: &TestFunction,
    x0: &[f64],
    alpha: f64,
    stream: &mut GaussianStream,
) -> Result<f64> {
    temporal_average_with_stats(model, cfg, h, x0, alpha, stream).map(|(v, _)| v)
}

/// Ergodic-limit estimate from one initial value.
#[derive(Debug, Clone, Serialize)]
pub struct InitialValueEstimate {
    pub x0: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `pi(h)` from `h(X_N)` at a long horizon.
#[derive(Debug, Clone, Serialize)]
pub struct ErgodicLimitEstimate {
    pub value: f64,
    pub stderr: f64,
    pub tau_fine: f64,
    pub horizon_t: f64,
    /// total number of paths, pooled over initial values
    pub n_paths: usize,
    pub per_initial: Vec<InitialValueEstimate>,
    /// largest pairwise gap between initial values in joint standard errors
    pub max_gap_in_stderr: f64,
    pub solver: SolverStats,
}

impl ErgodicLimitEstimate {
    /// A known limit with no sampling error.
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            tau_fine: 0.0,
            horizon_t: f64::INFINITY,
            n_paths: 0,
            per_initial: Vec::new(),
            max_gap_in_stderr: 0.0,
            solver: SolverStats::default(),
        }
    }
}

/// Joint-stderr multiple beyond which two initial values are said to disagree.
pub const ERGODICITY_GAP: f64 = 4.0;

/// Estimate `pi(h)` as the mean of `h(X_N)`, `N = round(T / tau)`, over
/// `n_paths` paths from each initial value, and check that the initial
/// values agree within four joint standard errors.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ergodic_limit(
    model: &SdeModel,
    cfg_fine: &BemConfig,
    h: &TestFunction,
    x0_list: &[Vec<f64>],
    horizon_t: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<ErgodicLimitEstimate> {
    cfg_fine.validate_for(model)?;
    if x0_list.is_empty() || n_paths < 2 {
        return Err(Error::config("ergodic limit needs at least one initial value and two paths"));
    }
    if !(horizon_t > 0.0 && horizon_t.is_finite()) {
        return Err(Error::config(format!("horizon must be positive, got {horizon_t}")));
    }
    if let Some(c) = model.dissipativity_hint() {
        if (-c * horizon_t).exp() >= 1e-10 {
            return Err(Error::config(format!(
                "horizon {horizon_t} too short for {}: need exp(-{c} T) < 1e-10",
                model.name()
            )));
        }
    }
    for x0 in x0_list {
        check_dim(x0, model)?;
    }
    let n_steps = (horizon_t / cfg_fine.tau).round() as u64;

    let mut per_initial = Vec::with_capacity(x0_list.len());
    let mut pooled = Vec::with_capacity(n_paths * x0_list.len());
    let mut solver = SolverStats::default();
    for (i, x0) in x0_list.iter().enumerate() {
        let seed = sub_seed(master_seed, i as u64);
        let results = map_indexed(n_paths, |p| {
            let mut stream = derive_stream(seed, p as u64);
            let mut sim = PathSimulator::new(model, cfg_fine, x0)?;
            for _ in 0..n_steps {
                sim.advance(&mut stream).map_err(|e| e.on_path(p as u64))?;
            }
            Ok((h.value(sim.state()), sim.stats()))
        })?;
        let values: Vec<f64> = results.iter().map(|r| r.0).collect();
        results.iter().for_each(|r| solver.merge(&r.1));
        let (value, stderr) = mean_stderr(&values);
        per_initial.push(InitialValueEstimate { x0: x0.clone(), value, stderr });
        pooled.extend(values);
    }

    let mut max_gap: f64 = 0.0;
    for (i, a) in per_initial.iter().enumerate() {
        for b in &per_initial[i + 1..] {
            let gap = (a.value - b.value).abs();
            let joint = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
            let floor = 1e-12 * (1.0 + a.value.abs().max(b.value.abs()));
            let ratio = if gap <= floor { 0.0 } else if joint > 0.0 { gap / joint } else { f64::INFINITY };
            max_gap = max_gap.max(ratio);
            if ratio > ERGODICITY_GAP {
                return Err(Error::Ergodicity(format!(
                    "estimates from x0 = {:?} ({} +- {}) and x0 = {:?} ({} +- {}) differ by {:.2} joint stderr",
                    a.x0, a.value, a.stderr, b.x0, b.value, b.stderr, ratio
                )));
            }
        }
    }
    let (value, stderr) = mean_stderr(&pooled);
    Ok(ErgodicLimitEstimate {
        value,
        stderr,
        tau_fine: cfg_fine.tau,
        horizon_t,
        n_paths: pooled.len(),
        per_initial,
        max_gap_in_stderr: max_gap,
        solver,
    })
}

/// One point of the curve `t -> E h(X_n)`.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub time: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// `E h(X_n)` recorded every `every` steps up to `n_steps`, over `n_paths`
/// paths started at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn expectation_curve(
    model: &SdeModel,
    cfg: &BemConfig,
    h: &TestFunction,
    x0: &[f64],
    n_steps: u64,
    every: u64,
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<CurvePoint>> {
    if every == 0 || n_paths < 2 {
        return Err(Error::config("expectation curve needs a positive stride and two paths"));
    }
    let per_path = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let mut sim = PathSimulator::new(model, cfg, x0)?;
        let mut out = vec![h.value(sim.state())];
        for n in 1..=n_steps {
            sim.advance(&mut stream).map_err(|e| e.on_path(p as u64))?;
            if n % every == 0 {
                out.push(h.value(sim.state()));
            }
        }
        Ok(out)
    })?;
    let n_points = per_path[0].len();
    Ok((0..n_points)
        .map(|j| {
            let column: Vec<f64> = per_path.iter().map(|v| v[j]).collect();
            let (mean, stderr) = mean_stderr(&column);
            let step = j as u64 * every;
            CurvePoint { step, time: step as f64 * cfg.tau, mean, stderr }
        })
        .collect())
}

/// Monte-Carlo samples of the deviation statistic `Z`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationBatch {
    pub samples: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    /// `N = round(tau^-alpha)`
    pub n_steps_used: u64,
    /// `tau^-alpha` before rounding
    pub tau_pow_neg_alpha: f64,
    pub pi_h_reference: f64,
    pub pi_h_stderr: f64,
    /// `tau^{-(alpha-1)/2} * pi_h_stderr`: shift of every Z induced by the
    /// uncertainty of the reference limit
    pub systematic_shift: f64,
    pub model_id: String,
    pub h_id: String,
    pub master_seed: u64,
    pub x0: Vec<f64>,
    pub solver: SolverStats,
}

/// `Z_i = tau^{-(alpha-1)/2} (Pi_i - pi_h)` over `n_paths` independent paths;
/// path `i` uses stream `(master_seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_deviations(
    model: &SdeModel,
    cfg: &BemConfig,
    h: &TestFunction,
    x0: &[f64],
    alpha: f64,
    n_paths: usize,
    pi_h: &ErgodicLimitEstimate,
    master_seed: u64,
) -> Result<DeviationBatch> {
    let n = n_steps_for(cfg.tau, alpha)?;
    cfg.validate_for(model)?;
    check_dim(x0, model)?;
    if n_paths == 0 {
        return Err(Error::config("n_paths must be positive"));
    }
    let scale = deviation_scale(cfg.tau, alpha);
    let results = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let (avg, stats) =
            temporal_average_with_stats(model, cfg, h, x0, alpha, &mut stream).map_err(|e| e.on_path(p as u64))?;
        Ok((scale * (avg - pi_h.value), stats))
    })?;
    let mut solver = SolverStats::default();
    results.iter().for_each(|r| solver.merge(&r.1));
    Ok(DeviationBatch {
        samples: results.into_iter().map(|r| r.0).collect(),
        alpha,
        tau: cfg.tau,
        n_steps_used: n,
        tau_pow_neg_alpha: cfg.tau.powf(-alpha),
        pi_h_reference: pi_h.value,
        pi_h_stderr: pi_h.stderr,
        systematic_shift: scale * pi_h.stderr,
        model_id: model.name().to_string(),
        h_id: h.name().to_string(),
        master_seed,
        x0: x0.to_vec(),
        solver,
    })
}

/// One row of a CLT table: `E f(Z)` at one step size.
#[derive(Debug, Clone, Serialize)]
pub struct CltRow {
    pub tau: f64,
    pub alpha: f64,
    pub n_paths: usize,
    pub f_mean: f64,
    pub f_stderr: f64,
    pub n_steps: u64,
    pub pi_h_ref: f64,
    pub pi_h_stderr: f64,
    pub seed: u64,
}

pub const CLT_CSV_HEADER: &str = "tau,alpha,n_paths,f_mean,f_stderr,N_steps,pi_h_ref,pi_h_stderr,seed";

impl CltRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tau,
            self.alpha,
            self.n_paths,
            self.f_mean,
            self.f_stderr,
            self.n_steps,
            self.pi_h_ref,
            self.pi_h_stderr,
            self.seed
        )
    }
}

/// Render rows as CSV with the standard header.
pub fn clt_csv(rows: &[CltRow]) -> String {
    let mut s = String::from(CLT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// `E f(Z_{tau,alpha}(h))` for each `tau` in a descending sweep. Every step
/// size reuses the same stream ids `(master_seed, 0..n_paths)`.
#[allow(clippy::too_many_arguments)]
pub fn clt_table(
    model: &SdeModel,
    base: &BemConfig,
    h: &TestFunction,
    f: &TestFunction,
    alpha: f64,
    taus: &[f64],
    x0: &[f64],
    n_paths: usize,
    pi_h: &ErgodicLimitEstimate,
    master_seed: u64,
) -> Result<(Vec<CltRow>, Vec<DeviationBatch>)> {
    if taus.is_empty() {
        return Err(Error::config("clt table needs at least one tau"));
    }
    if taus.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::config(format!("taus must be strictly descending, got {taus:?}")));
    }
    for &tau in taus {
        n_steps_for(tau, alpha)?;
        base.with_tau(tau).validate_for(model)?;
    }
    let mut rows = Vec::with_capacity(taus.len());
    let mut batches = Vec::with_capacity(taus.len());
    for &tau in taus {
        let batch = sample_deviations(model, &base.with_tau(tau), h, x0, alpha, n_paths, pi_h, master_seed)?;
        let fz: Vec<f64> = batch.samples.iter().map(|&z| f.value1(z)).collect();
        let (f_mean, f_stderr) = mean_stderr(&fz);
        rows.push(CltRow {
            tau,
            alpha,
            n_paths,
            f_mean,
            f_stderr,
            n_steps: batch.n_steps_used,
            pi_h_ref: pi_h.value,
            pi_h_stderr: pi_h.stderr,
            seed: master_seed,
        });
        batches.push(batch);
    }
    Ok((rows, batches))
}

/// Time-average estimate of `pi_tau(f)` at one step size.
#[derive(Debug, Clone, Serialize)]
pub struct BiasPoint {
    pub tau: f64,
    pub estimate: f64,
    pub stderr: f64,
    /// |estimate - reference|
    pub bias: f64,
    /// joint standard error of the bias
    pub bias_stderr: f64,
    /// bias exceeds twice its joint standard error
    pub resolved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasVerdict {
    Fitted,
    /// fewer than three step sizes show a bias above Monte-Carlo noise
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasOrderReport {
    pub reference: f64,
    pub reference_stderr: f64,
    pub tau_ref: f64,
    pub burn_in_time: f64,
    pub c1_hat: f64,
    pub points: Vec<BiasPoint>,
    pub verdict: BiasVerdict,
    pub fit: Option<OrderFit>,
}

/// Long-trajectory estimate of `pi_tau(f)`: per path, the time average of
/// `f(X_n)` over `t in [burn_in, horizon]`; then mean and stderr over paths.
#[allow(clippy::too_many_arguments)]
pub fn numerical_invariant_mean(
    model: &SdeModel,
    cfg: &BemConfig,
    f: &TestFunction,
    x0: &[f64],
    burn_in_time: f64,
    horizon_t: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<(f64, f64)> {
    let n_burn = (burn_in_time / cfg.tau).ceil() as u64;
    let n_total = (horizon_t / cfg.tau).round() as u64;
    if n_total <= n_burn || n_paths < 2 {
        return Err(Error::config(format!(
            "horizon {horizon_t} must exceed the burn-in {burn_in_time} and at least two paths are needed"
        )));
    }
    let values = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let mut sim = PathSimulator::new(model, cfg, x0)?;
        let mut sum = CompensatedSum::new();
        for n in 1..=n_total {
            sim.advance(&mut stream).map_err(|e| e.on_path(p as u64))?;
            if n > n_burn {
                sum.add(f.value(sim.state()));
            }
        }
        Ok(sum.value() / (n_total - n_burn) as f64)
    })?;
    Ok(mean_stderr(&values))
}

/// Measure `|pi_tau(f) - pi(f)|` against a fine reference at `tau_ref` and
/// fit its order in `tau`. Burn-in is `3 / c1_hat`.
#[allow(clippy::too_many_arguments)]
pub fn invariant_bias_order(
    model: &SdeModel,
    base: &BemConfig,
    f: &TestFunction,
    taus: &[f64],
    tau_ref: f64,
    x0: &[f64],
    horizon_t: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<BiasOrderReport> {
    let min_tau = taus.iter().copied().fold(f64::INFINITY, f64::min);
    if taus.is_empty() || !(tau_ref > 0.0 && tau_ref <= min_tau / 8.0) {
        return Err(Error::config(format!("tau_ref = {tau_ref} must be positive and at most min(taus)/8 = {}", min_tau / 8.0)));
    }
    check_dim(x0, model)?;
    let c1_hat = match model.dissipativity_hint() {
        Some(c) => c,
        None => estimate_assumptions(model, 1000, 3.0, master_seed)?.c1_hat,
    };
    if !(c1_hat > 0.0) {
        return Err(Error::config(format!("model {} is not dissipative on the probe ball (c1_hat = {c1_hat})", model.name())));
    }
    let burn_in_time = 3.0 / c1_hat;
    let ref_cfg = base.with_tau(tau_ref);
    ref_cfg.validate_for(model)?;
    let (reference, reference_stderr) =
        numerical_invariant_mean(model, &ref_cfg, f, x0, burn_in_time, horizon_t, n_paths, sub_seed(master_seed, 0))?;

    let mut points = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let cfg = base.with_tau(tau);
        cfg.validate_for(model)?;
        let seed = sub_seed(master_seed, i as u64 + 1);
        let (estimate, stderr) = numerical_invariant_mean(model, &cfg, f, x0, burn_in_time, horizon_t, n_paths, seed)?;
        let bias = (estimate - reference).abs();
        let bias_stderr = (stderr * stderr + reference_stderr * reference_stderr).sqrt();
        let resolved = bias > 0.0 && bias > 2.0 * bias_stderr;
        points.push(BiasPoint { tau, estimate, stderr, bias, bias_stderr, resolved });
    }
    let fit_points: Vec<(f64, f64)> = points.iter().filter(|p| p.resolved).map(|p| (p.tau, p.bias)).collect();
    let (verdict, fit) = if fit_points.len() >= 3 {
        (BiasVerdict::Fitted, Some(fit_order(&fit_points)?))
    } else {
        (BiasVerdict::Inconclusive, None)
    };
    Ok(BiasOrderReport { reference, reference_stderr, tau_ref, burn_in_time, c1_hat, points, verdict, fit })
}
