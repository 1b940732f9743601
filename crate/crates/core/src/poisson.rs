//! The Poisson-equation solution `phi = -int_0^inf E(h(X^x(t)) - pi(h)) dt`,
//! the asymptotic CLT variance `pi(|sigma phi'|^2)` and the split of the
//! deviation statistic into a martingale part `H` and a remainder `R`.
//!
//! Everything here is one-dimensional.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::ergodic::{deviation_scale, n_steps_for};
use crate::error::{Error, Result};
use crate::integrator::{BemConfig, BemStepper, PathSimulator};
use crate::model::{estimate_assumptions, SdeModel, TestFunction};
use crate::parallel::{map_chunks, map_indexed};
use crate::rng::derive_stream;
use crate::stats::{batch_means_stderr, mean_stderr, sample_variance, CompensatedSum, DEFAULT_BATCHES};

/// Uniform grid `a = x_0 < ... < x_{n-1} = b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub a: f64,
    pub b: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() || n < 3 {
            return Err(Error::config(format!("grid needs a < b and at least 3 points, got [{a}, {b}] x {n}")));
        }
        Ok(Self { a, b, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / (self.n - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        if j + 1 == self.n {
            self.b
        } else {
            self.a + j as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.point(j)).collect()
    }
}

/// Gridded `phi` and `phi'` with the settings that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct PoissonTable {
    pub grid: GridSpec,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    /// Monte-Carlo standard error of each `phi` value
    pub phi_stderr: Vec<f64>,
    /// central differences of `phi` (second-order one-sided at the ends)
    pub grad_phi: Vec<f64>,
    /// pathwise-derivative estimate of `phi'`, when requested
    pub grad_phi_variational: Option<Vec<f64>>,
    pub t_trunc: f64,
    pub quad_tau: f64,
    pub n_inner_paths: usize,
    pub pi_h_used: f64,
    pub seed: u64,
    pub model_id: String,
    pub h_id: String,
    /// `(1 + max|x|) e^{-c1_hat t_trunc} / c1_hat`, a rough truncation scale
    pub truncation_bound: f64,
}

/// Second-order finite-difference derivative of gridded values.
pub fn fd_gradient(values: &[f64], spacing: f64) -> Vec<f64> {
    let n = values.len();
    let mut g = vec![0.0; n];
    if n < 3 {
        return g;
    }
    for j in 1..n - 1 {
        g[j] = (values[j + 1] - values[j - 1]) / (2.0 * spacing);
    }
    g[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * spacing);
    g[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * spacing);
    g
}

impl PoissonTable {
    pub fn spacing(&self) -> f64 {
        self.grid.spacing()
    }

    /// `phi'(x)` by linear interpolation; `x` outside the grid is clamped to
    /// the nearest end and the second value is `true`.
    pub fn grad_at(&self, x: f64) -> (f64, bool) {
        interpolate(&self.grid, &self.grad_phi, x)
    }

    pub fn phi_at(&self, x: f64) -> (f64, bool) {
        interpolate(&self.grid, &self.phi, x)
    }

    /// Largest gap between the variational gradient and the finite-difference
    /// gradient over interior points, with the tolerance
    /// `2 h^2 max|phi'''|` estimated from the table itself.
    pub fn gradient_check(&self) -> Option<(f64, f64)> {
        let var = self.grad_phi_variational.as_ref()?;
        let n = self.phi.len();
        let h = self.spacing();
        let gap = (1..n - 1).map(|j| (var[j] - self.grad_phi[j]).abs()).fold(0.0, f64::max);
        let third = (2..n - 2)
            .map(|j| {
                (self.phi[j + 2] - 2.0 * self.phi[j + 1] + 2.0 * self.phi[j - 1] - self.phi[j - 2]) / (2.0 * h.powi(3))
            })
            .fold(0.0, |m: f64, v| m.max(v.abs()));
        Some((gap, 2.0 * h * h * third))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# model={}", self.model_id);
        let _ = writeln!(s, "# h={}", self.h_id);
        let _ = writeln!(s, "# pi_h_used={}", self.pi_h_used);
        let _ = writeln!(s, "# t_trunc={}", self.t_trunc);
        let _ = writeln!(s, "# quad_tau={}", self.quad_tau);
        let _ = writeln!(s, "# n_inner_paths={}", self.n_inner_paths);
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(s, "# truncation_bound={}", self.truncation_bound);
        s.push_str("x,phi,grad_phi,phi_stderr\n");
        for j in 0..self.x.len() {
            let _ = writeln!(s, "{},{},{},{}", self.x[j], self.phi[j], self.grad_phi[j], self.phi_stderr[j]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::config(format!("malformed Poisson table: {what}"));
        let mut meta = std::collections::HashMap::new();
        let (mut x, mut phi, mut grad, mut se) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(kv) = line.strip_prefix('#') {
                if let Some((k, v)) = kv.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line.starts_with("x,") {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad(line)))
                .collect::<Result<_>>()?;
            if cols.len() < 3 {
                return Err(bad(line));
            }
            x.push(cols[0]);
            phi.push(cols[1]);
            grad.push(cols[2]);
            se.push(cols.get(3).copied().unwrap_or(0.0));
        }
        if x.len() < 3 {
            return Err(bad("fewer than 3 rows"));
        }
        let get = |k: &str| -> Result<String> { meta.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}"))) };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let grid = GridSpec::new(x[0], x[x.len() - 1], x.len())?;
        Ok(Self {
            grid,
            x,
            phi,
            phi_stderr: se,
            grad_phi: grad,
            grad_phi_variational: None,
            t_trunc: num("t_trunc")?,
            quad_tau: num("quad_tau")?,
            n_inner_paths: num("n_inner_paths")? as usize,
            pi_h_used: num("pi_h_used")?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            model_id: get("model").unwrap_or_default(),
            h_id: get("h").unwrap_or_default(),
            truncation_bound: num("truncation_bound").unwrap_or(f64::NAN),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn interpolate(grid: &GridSpec, values: &[f64], x: f64) -> (f64, bool) {
    let n = values.len();
    if x <= grid.a {
        return (values[0], x < grid.a);
    }
    if x >= grid.b {
        return (values[n - 1], x > grid.b);
    }
    let s = (x - grid.a) / grid.spacing();
    let j = (s.floor() as usize).min(n - 2);
    let w = s - j as f64;
    ((1.0 - w) * values[j] + w * values[j + 1], false)
}

fn decay_rate(model: &SdeModel, radius: f64, seed: u64) -> Result<f64> {
    match model.dissipativity_hint() {
        Some(c) => Ok(c),
        None => Ok(estimate_assumptions(model, 1000, radius.max(1.0), seed)?.c1_hat),
    }
}

fn require_scalar(model: &SdeModel) -> Result<()> {
    if !model.is_scalar() {
        return Err(Error::config(format!(
            "{} has dimension {}x{}; the Poisson tools are one-dimensional",
            model.name(),
            model.state_dim(),
            model.noise_dim()
        )));
    }
    Ok(())
}

/// Settings of [`solve_phi`].
#[derive(Debug, Clone, Copy)]
pub struct PhiSettings {
    pub t_trunc: f64,
    pub quad_tau: f64,
    /// must be even: paths come in antithetic pairs
    pub n_inner_paths: usize,
    pub master_seed: u64,
    /// also estimate `phi'` through the first-variation recursion
    pub variational_gradient: bool,
}

/// Antithetic pairs per parallel work unit; fixed so results never depend on
/// the worker count.
const PAIRS_PER_CHUNK: usize = 16;

/// Estimate `phi` on `grid`.
///
/// Every grid point is driven by the same inner Brownian paths, each used
/// together with its negation. The time integral is the trapezoid rule on the
/// BEM grid of step `quad_tau` up to `t_trunc`.
pub fn solve_phi(
    model: &SdeModel,
    h: &TestFunction,
    pi_h: f64,
    grid: &GridSpec,
    settings: &PhiSettings,
) -> Result<PoissonTable> {
    require_scalar(model)?;
    let PhiSettings { t_trunc, quad_tau, n_inner_paths, master_seed, variational_gradient } = *settings;
    let radius = grid.a.abs().max(grid.b.abs());
    let c1 = decay_rate(model, radius, master_seed)?;
    if !(c1 > 0.0) {
        return Err(Error::config(format!("model {} shows no dissipation on the grid (c1_hat = {c1})", model.name())));
    }
    if !(t_trunc >= 3.0 / c1) {
        return Err(Error::config(format!("t_trunc = {t_trunc} is below 3 / c1_hat = {}", 3.0 / c1)));
    }
    if !(quad_tau > 0.0 && quad_tau <= t_trunc / 100.0) {
        return Err(Error::config(format!("quad_tau = {quad_tau} must lie in (0, t_trunc / 100]")));
    }
    if n_inner_paths < 2 || n_inner_paths % 2 != 0 {
        return Err(Error::config(format!("n_inner_paths must be a positive even number, got {n_inner_paths}")));
    }
    if variational_gradient && !h.has_gradient() {
        return Err(Error::config(format!("variational gradient needs the derivative of {}", h.name())));
    }
    let cfg = BemConfig::new(quad_tau);
    cfg.validate_for(model)?;
    let n_t = (t_trunc / quad_tau).round() as usize;
    let xs = grid.points();
    let n_grid = xs.len();
    let n_pairs = n_inner_paths / 2;

    struct Partial {
        sum: Vec<CompensatedSum>,
        sum_sq: Vec<CompensatedSum>,
        grad: Vec<CompensatedSum>,
    }

    let partials = map_chunks(n_pairs, PAIRS_PER_CHUNK, |range| {
        let stepper = BemStepper::new(model, cfg);
        let mut part = Partial {
            sum: vec![CompensatedSum::new(); n_grid],
            sum_sq: vec![CompensatedSum::new(); n_grid],
            grad: vec![CompensatedSum::new(); n_grid],
        };
        let mut dw = vec![0.0; n_t];
        let mut hg = [0.0];
        for pair in range {
            let mut stream = derive_stream(master_seed, pair as u64);
            stream.fill_increments(quad_tau, &mut dw);
            for (j, &x0) in xs.iter().enumerate() {
                let mut integral = 0.0;
                let mut dintegral = 0.0;
                for sign in [1.0, -1.0] {
                    let mut x = x0;
                    let mut eta = 1.0;
                    let mut acc = 0.5 * (h.value1(x) - pi_h);
                    let mut gacc = 0.0;
                    if variational_gradient {
                        h.gradient(&[x], &mut hg);
                        gacc = 0.5 * hg[0];
                    }
                    for (k, &w) in dw.iter().enumerate() {
                        let w = sign * w;
                        let rhs = x + model.diffusion1(x) * w;
                        let (y, _) = stepper.solve_scalar(x, rhs).map_err(|e| grid_error(j, x0, e))?;
                        let weight = if k + 1 == n_t { 0.5 } else { 1.0 };
                        acc += weight * (h.value1(y) - pi_h);
                        if variational_gradient {
                            eta *= (1.0 + model.diffusion1_prime(x) * w) / (1.0 - quad_tau * model.drift1_prime(y));
                            h.gradient(&[y], &mut hg);
                            gacc += weight * hg[0] * eta;
                        }
                        x = y;
                    }
                    integral += 0.5 * acc;
                    dintegral += 0.5 * gacc;
                }
                let sample = -quad_tau * integral;
                if !sample.is_finite() {
                    return Err(Error::Diagnostic(format!("non-finite inner simulation at grid point {j} (x = {x0})")));
                }
                part.sum[j].add(sample);
                part.sum_sq[j].add(sample * sample);
                part.grad[j].add(-quad_tau * dintegral);
            }
        }
        Ok(part)
    })?;

    let mut sum = vec![CompensatedSum::new(); n_grid];
    let mut sum_sq = vec![CompensatedSum::new(); n_grid];
    let mut gsum = vec![CompensatedSum::new(); n_grid];
    for p in &partials {
        for j in 0..n_grid {
            sum[j].add(p.sum[j].value());
            sum_sq[j].add(p.sum_sq[j].value());
            gsum[j].add(p.grad[j].value());
        }
    }
    let m = n_pairs as f64;
    let phi: Vec<f64> = sum.iter().map(|s| s.value() / m).collect();
    let phi_stderr: Vec<f64> = (0..n_grid)
        .map(|j| {
            if n_pairs < 2 {
                return 0.0;
            }
            let var = ((sum_sq[j].value() - m * phi[j] * phi[j]) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    let grad_phi = fd_gradient(&phi, grid.spacing());
    let grad_phi_variational = variational_gradient.then(|| gsum.iter().map(|s| s.value() / m).collect());
    Ok(PoissonTable {
        grid: *grid,
        x: xs,
        phi,
        phi_stderr,
        grad_phi,
        grad_phi_variational,
        t_trunc: n_t as f64 * quad_tau,
        quad_tau,
        n_inner_paths,
        pi_h_used: pi_h,
        seed: master_seed,
        model_id: model.name().to_string(),
        h_id: h.name().to_string(),
        truncation_bound: (1.0 + radius) * (-c1 * t_trunc).exp() / c1,
    })
}

fn grid_error(j: usize, x: f64, e: Error) -> Error {
    Error::Diagnostic(format!("inner simulation failed at grid point {j} (x = {x}): {e}"))
}

/// `Lf(x) = <grad f, b(x)> + 1/2 <hess f, sigma sigma^T>` from a gradient
/// (length d) and a row-major Hessian (d x d) evaluated at `x`.
pub fn generator_apply(model: &SdeModel, x: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
    let (d, m) = (model.state_dim(), model.noise_dim());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    model.drift(x, &mut b);
    model.diffusion(x, &mut s);
    let first: f64 = grad.iter().zip(&b).map(|(g, b)| g * b).sum();
    let mut second = 0.0;
    for i in 0..d {
        for j in 0..d {
            let a_ij: f64 = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            second += hess[i * d + j] * a_ij;
        }
    }
    first + 0.5 * second
}

/// [`generator_apply`] with central finite-difference derivatives of `f`.
pub fn generator_apply_fd(model: &SdeModel, f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
    let d = x.len();
    let step = |v: f64| 1e-4 * (1.0 + v.abs());
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut p = x.to_vec();
    let f0 = f(x);
    for i in 0..d {
        let hi = step(x[i]);
        p[i] = x[i] + hi;
        let fp = f(&p);
        p[i] = x[i] - hi;
        let fm = f(&p);
        p[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * hi);
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = step(x[j]);
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * hi;
                p[j] = x[j] + sj * hj;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let mixed = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
            hess[i * d + j] = mixed;
            hess[j * d + i] = mixed;
        }
    }
    generator_apply(model, x, &grad, &hess)
}

/// Boundary points on each side excluded from the residual.
pub const RESIDUAL_MARGIN: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// max over interior points of |L phi - (h - pi_h)|
    pub max_abs: f64,
    pub at_x: f64,
    /// max over the same points of |h - pi_h|
    pub h_scale: f64,
    /// (x, residual) for every interior point
    pub residuals: Vec<(f64, f64)>,
}

impl ResidualReport {
    pub fn relative(&self) -> f64 {
        if self.h_scale > 0.0 {
            self.max_abs / self.h_scale
        } else {
            self.max_abs
        }
    }
}

/// Residual of `L phi = h - pi_h` with `phi'` and `phi''` from central
/// differences of the tabulated `phi`.
pub fn poisson_residual(table: &PoissonTable, model: &SdeModel, h: &TestFunction, pi_h: f64) -> Result<ResidualReport> {
    require_scalar(model)?;
    let n = table.phi.len();
    if n < 101 {
        return Err(Error::config(format!("poisson_residual needs at least 101 grid points, got {n}")));
    }
    let dx = table.spacing();
    let phi = &table.phi;
    let mut residuals = Vec::with_capacity(n - 2 * RESIDUAL_MARGIN);
    let (mut max_abs, mut at_x, mut h_scale) = (0.0f64, f64::NAN, 0.0f64);
    for j in RESIDUAL_MARGIN..n - RESIDUAL_MARGIN {
        let x = table.x[j];
        let d1 = (phi[j + 1] - phi[j - 1]) / (2.0 * dx);
        let d2 = (phi[j + 1] - 2.0 * phi[j] + phi[j - 1]) / (dx * dx);
        let target = h.value1(x) - pi_h;
        let r = generator_apply(model, &[x], &[d1], &[d2]) - target;
        if r.abs() > max_abs {
            max_abs = r.abs();
            at_x = x;
        }
        h_scale = h_scale.max(target.abs());
        residuals.push((x, r));
    }
    Ok(ResidualReport { max_abs, at_x, h_scale, residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    /// time average along one long trajectory
    ErgodicAverage,
    /// quadrature against the one-dimensional stationary density
    GridQuadrature,
    /// `E (1/m) sum_{k<m} |sigma phi'|^2(X_k)` over independent finite paths
    PredictableVariation,
}

/// Estimate of `pi(|sigma phi'|^2)`.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: VarianceMethod,
    /// number of visited states outside the table grid (clamped)
    pub clamped_steps: u64,
    pub n_samples: u64,
}

/// Smallest trajectory length accepted by [`asymptotic_variance`].
pub const MIN_VARIANCE_STEPS: u64 = 100_000;

/// Time average of `|sigma(X_k) phi'(X_k)|^2` over `n_steps` states after
/// `burn_in_steps`, along one trajectory from `x0`; batch-means stderr.
pub fn asymptotic_variance(
    model: &SdeModel,
    table: &PoissonTable,
    cfg: &BemConfig,
    x0: f64,
    n_steps: u64,
    burn_in_steps: u64,
    master_seed: u64,
) -> Result<VarianceEstimate> {
    require_scalar(model)?;
    if n_steps < MIN_VARIANCE_STEPS {
        return Err(Error::config(format!("asymptotic_variance needs at least {MIN_VARIANCE_STEPS} steps, got {n_steps}")));
    }
    let mut stream = derive_stream(master_seed, 0);
    let mut sim = PathSimulator::new(model, cfg, &[x0])?;
    for _ in 0..burn_in_steps {
        sim.advance(&mut stream)?;
    }
    let mut values = Vec::with_capacity(n_steps as usize);
    let mut clamped = 0u64;
    for _ in 0..n_steps {
        let x = sim.state()[0];
        let (g, out) = table.grad_at(x);
        clamped += out as u64;
        let v = model.diffusion1(x) * g;
        values.push(v * v);
        sim.advance(&mut stream)?;
    }
    let value = values.iter().copied().collect::<CompensatedSum>().value() / values.len() as f64;
    Ok(VarianceEstimate {
        value: value.max(0.0),
        stderr: batch_means_stderr(&values, DEFAULT_BATCHES),
        method: VarianceMethod::ErgodicAverage,
        clamped_steps: clamped,
        n_samples: n_steps,
    })
}

/// `int sigma^2 phi'^2 p dx` with the stationary density
/// `p ∝ sigma^-2 exp(int 2 b / sigma^2)` restricted to the table grid.
/// Needs a diffusion that does not vanish on the grid.
pub fn variance_grid_quadrature(model: &SdeModel, table: &PoissonTable) -> Result<VarianceEstimate> {
    require_scalar(model)?;
    let xs = &table.x;
    let n = xs.len();
    let dx = table.spacing();
    let s2: Vec<f64> = xs.iter().map(|&x| model.diffusion1(x).powi(2)).collect();
    if s2.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::contract("grid quadrature needs a diffusion that does not vanish on the grid"));
    }
    // log density up to a constant, by the trapezoid rule on 2b/sigma^2
    let ratio: Vec<f64> = xs.iter().zip(&s2).map(|(&x, &v)| 2.0 * model.drift1(x) / v).collect();
    let mut log_p = vec![0.0; n];
    for j in 1..n {
        log_p[j] = log_p[j - 1] + 0.5 * dx * (ratio[j] + ratio[j - 1]);
    }
    for j in 0..n {
        log_p[j] -= s2[j].ln();
    }
    let top = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = |j: usize| if j == 0 || j + 1 == n { 0.5 } else { 1.0 };
    let mut mass = CompensatedSum::new();
    let mut integral = CompensatedSum::new();
    for j in 0..n {
        let p = (log_p[j] - top).exp() * w(j);
        mass.add(p);
        integral.add(p * s2[j] * table.grad_phi[j] * table.grad_phi[j]);
    }
    Ok(VarianceEstimate {
        value: integral.value() / mass.value(),
        stderr: 0.0,
        method: VarianceMethod::GridQuadrature,
        clamped_steps: 0,
        n_samples: n as u64,
    })
}

/// `E[(1/m) sum_{k<m} |sigma phi'|^2(X_k)]` over `n_paths` paths from `x0`,
/// `m = round(tau^-2)`. This is exactly `Var(H)` of the martingale part of
/// the deviation statistic, estimated without using the increments.
pub fn predictable_variation(
    model: &SdeModel,
    table: &PoissonTable,
    cfg: &BemConfig,
    x0: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<VarianceEstimate> {
    require_scalar(model)?;
    let m = n_steps_for(cfg.tau, 2.0)?;
    let per_path = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let mut sim = PathSimulator::new(model, cfg, &[x0])?;
        let mut sum = CompensatedSum::new();
        let mut clamped = 0u64;
        for k in 0..m {
            let x = sim.state()[0];
            let (g, out) = table.grad_at(x);
            clamped += out as u64;
            sum.add((model.diffusion1(x) * g).powi(2));
            if k + 1 < m {
                sim.advance(&mut stream).map_err(|e| e.on_path(p as u64))?;
            }
        }
        Ok((sum.value() / m as f64, clamped))
    })?;
    let values: Vec<f64> = per_path.iter().map(|v| v.0).collect();
    let (value, stderr) = mean_stderr(&values);
    Ok(VarianceEstimate {
        value: value.max(0.0),
        stderr,
        method: VarianceMethod::PredictableVariation,
        clamped_steps: per_path.iter().map(|v| v.1).sum(),
        n_samples: n_paths as u64,
    })
}

/// Per-path split `Z = H + R` at `alpha = 2`.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub tau: f64,
    /// `m = round(tau^-2)`
    pub m: u64,
    pub z_samples: Vec<f64>,
    pub h_samples: Vec<f64>,
    pub r_samples: Vec<f64>,
    pub clamped_steps: u64,
}

impl DecompositionReport {
    pub fn mean_abs_r(&self) -> f64 {
        self.r_samples.iter().map(|r| r.abs()).sum::<f64>() / self.r_samples.len() as f64
    }

    pub fn var_h(&self) -> f64 {
        sample_variance(&self.h_samples)
    }

    /// Largest `|H + R - Z| / (1 + |Z|)` over paths.
    pub fn max_identity_gap(&self) -> f64 {
        self.z_samples
            .iter()
            .zip(self.h_samples.iter().zip(&self.r_samples))
            .map(|(z, (h, r))| (h + r - z).abs() / (1.0 + z.abs()))
            .fold(0.0, f64::max)
    }
}

/// Accumulate `H = -tau^{1/2} sum_{k<m} phi'(X_k) sigma(X_k) dW_k` alongside
/// `Z = tau^{-1/2} (Pi_{tau,2}(h) - pi_h)` on the same increments, and set
/// `R = Z - H`. Path `i` uses stream `(master_seed, i)`, as in
/// [`crate::ergodic::sample_deviations`].
#[allow(clippy::too_many_arguments)]
pub fn clt_decomposition(
    model: &SdeModel,
    table: &PoissonTable,
    cfg: &BemConfig,
    h: &TestFunction,
    pi_h: f64,
    x0: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<DecompositionReport> {
    require_scalar(model)?;
    let m = n_steps_for(cfg.tau, 2.0)?;
    let scale = deviation_scale(cfg.tau, 2.0);
    let root_tau = cfg.tau.sqrt();
    let per_path = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let mut sim = PathSimulator::new(model, cfg, &[x0])?;
        let mut avg = CompensatedSum::new();
        let mut mart = CompensatedSum::new();
        let mut clamped = 0u64;
        for _ in 0..m {
            let x = sim.state()[0];
            avg.add(h.value1(x));
            let (g, out) = table.grad_at(x);
            clamped += out as u64;
            let s = model.diffusion1(x);
            sim.advance(&mut stream).map_err(|e| e.on_path(p as u64))?;
            mart.add(g * s * sim.last_increment()[0]);
        }
        let z = scale * (avg.value() / m as f64 - pi_h);
        let hh = -root_tau * mart.value();
        Ok((z, hh, z - hh, clamped))
    })?;
    Ok(DecompositionReport {
        tau: cfg.tau,
        m,
        z_samples: per_path.iter().map(|v| v.0).collect(),
        h_samples: per_path.iter().map(|v| v.1).collect(),
        r_samples: per_path.iter().map(|v| v.2).collect(),
        clamped_steps: per_path.iter().map(|v| v.3).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_test_function;

    fn ou() -> SdeModel {
        SdeModel::ornstein_uhlenbeck(8.0, 1.0).unwrap()
    }

    fn settings(t_trunc: f64, quad_tau: f64, n: usize) -> PhiSettings {
        PhiSettings { t_trunc, quad_tau, n_inner_paths: n, master_seed: 3, variational_gradient: false }
    }

    #[test]
    fn constant_h_gives_zero_phi() {
        let g = GridSpec::new(-1.0, 1.0, 11).unwrap();
        let t = solve_phi(&SdeModel::example51(), &TestFunction::constant(2.0), 2.0, &g, &settings(0.5, 0.005, 4))
            .unwrap();
        assert!(t.phi.iter().all(|&v| v == 0.0));
        assert!(t.grad_phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ou_linear_phi_matches_closed_form() {
        // antithetic pairs cancel the noise exactly for linear dynamics; what
        // remains is the trapezoid bias tau/2 of sum_k r^k
        let h = builtin_test_function("x").unwrap();
        let g = GridSpec::new(-2.0, 2.0, 41).unwrap();
        let tau = 2f64.powi(-11);
        let t = solve_phi(&ou(), &h, 0.0, &g, &settings(1.5, tau, 2)).unwrap();
        let (phi1, _) = t.phi_at(1.0);
        assert!((phi1 + 0.125).abs() < 1e-3, "phi(1) = {phi1}");
        let r = 1.0 / (1.0 + 8.0 * tau);
        let n_t = (1.5 / tau).round() as i32;
        let exact_discrete = -tau * ((1.0 - r.powi(n_t + 1)) / (1.0 - r) - 0.5 - 0.5 * r.powi(n_t));
        assert!((phi1 - exact_discrete).abs() < 1e-12, "{phi1} vs {exact_discrete}");
        for &gp in &t.grad_phi {
            assert!((gp - exact_discrete).abs() < 1e-9);
        }
    }

    #[test]
    fn preconditions_are_checked() {
        let h = builtin_test_function("x").unwrap();
        let g = GridSpec::new(-1.0, 1.0, 11).unwrap();
        assert!(solve_phi(&ou(), &h, 0.0, &g, &settings(0.1, 0.001, 2)).is_err());
        assert!(solve_phi(&ou(), &h, 0.0, &g, &settings(1.0, 0.02, 2)).is_err());
        assert!(solve_phi(&ou(), &h, 0.0, &g, &settings(1.0, 0.001, 3)).is_err());
        struct Planar;
        impl crate::model::Coefficients for Planar {
            fn drift(&self, x: &[f64], out: &mut [f64]) {
                out.iter_mut().zip(x).for_each(|(o, v)| *o = -v);
            }
            fn diffusion(&self, _: &[f64], out: &mut [f64]) {
                out.iter_mut().for_each(|o| *o = 0.0);
            }
        }
        let vector = SdeModel::custom("planar", 2, 2, 1, std::sync::Arc::new(Planar)).unwrap();
        assert!(solve_phi(&vector, &h, 0.0, &g, &settings(1.0, 0.001, 2)).is_err());
    }

    #[test]
    fn variational_gradient_agrees_with_differences() {
        let h = builtin_test_function("sin_plus_one").unwrap();
        let g = GridSpec::new(-1.0, 1.0, 41).unwrap();
        let mut s = settings(0.4, 0.004, 200);
        s.variational_gradient = true;
        let t = solve_phi(&SdeModel::example51(), &h, 1.0, &g, &s).unwrap();
        let var = t.grad_phi_variational.as_ref().unwrap();
        for j in 1..40 {
            assert!((var[j] - t.grad_phi[j]).abs() < 2e-3, "j = {j}: {} vs {}", var[j], t.grad_phi[j]);
        }
        let (gap, _) = t.gradient_check().unwrap();
        assert!(gap < 2e-3);
    }

    #[test]
    fn generator_examples() {
        let m = ou();
        assert_eq!(generator_apply(&m, &[0.7], &[0.0], &[0.0]), 0.0);
        // f = x^2: L f = -2 theta x^2 + s^2
        let x = 0.6;
        let lf = generator_apply(&m, &[x], &[2.0 * x], &[2.0]);
        assert!((lf - (-16.0 * x * x + 1.0)).abs() < 1e-14);
        assert_eq!(generator_apply(&SdeModel::example51(), &[1.0], &[1.0], &[0.0]), -9.0);
        let fd = generator_apply_fd(&m, &|v: &[f64]| v[0] * v[0], &[x]);
        assert!((fd - lf).abs() < 1e-6, "{fd} vs {lf}");
    }

    fn injected(phi: impl Fn(f64) -> f64) -> PoissonTable {
        let grid = GridSpec::new(-3.0, 3.0, 121).unwrap();
        let x = grid.points();
        let phi: Vec<f64> = x.iter().map(|&v| phi(v)).collect();
        let grad_phi = fd_gradient(&phi, grid.spacing());
        PoissonTable {
            grid,
            phi_stderr: vec![0.0; x.len()],
            x,
            phi,
            grad_phi,
            grad_phi_variational: None,
            t_trunc: 1.0,
            quad_tau: 0.001,
            n_inner_paths: 2,
            pi_h_used: 0.0,
            seed: 0,
            model_id: "ou".into(),
            h_id: "x".into(),
            truncation_bound: 0.0,
        }
    }

    #[test]
    fn exact_ou_phi_has_zero_residual() {
        let t = injected(|x| -x / 8.0);
        let r = poisson_residual(&t, &ou(), &builtin_test_function("x").unwrap(), 0.0).unwrap();
        assert!(r.max_abs < 1e-12, "{}", r.max_abs);
        assert_eq!(r.residuals.len(), 121 - 10);
        let zero = injected(|_| 0.0);
        let r = poisson_residual(&zero, &ou(), &TestFunction::constant(1.0), 1.0).unwrap();
        assert_eq!(r.max_abs, 0.0);
    }

    #[test]
    fn residual_needs_fine_grid() {
        let mut t = injected(|x| x);
        t.grid = GridSpec::new(-1.0, 1.0, 50).unwrap();
        t.x.truncate(50);
        t.phi.truncate(50);
        assert!(poisson_residual(&t, &ou(), &TestFunction::constant(0.0), 0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = injected(|x| x.sin());
        let back = PoissonTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.phi, t.phi);
        assert_eq!(back.grad_phi, t.grad_phi);
        assert_eq!(back.t_trunc, t.t_trunc);
        assert_eq!(back.grid, t.grid);
    }

    #[test]
    fn interpolation_clamps_and_counts() {
        let t = injected(|x| x * x);
        let (g, out) = t.grad_at(10.0);
        assert!(out);
        assert_eq!(g, *t.grad_phi.last().unwrap());
        let (g, out) = t.grad_at(1.025);
        assert!(!out);
        assert!((g - 2.05).abs() < 1e-9);
    }

    #[test]
    fn ou_variance_by_all_methods() {
        let m = ou();
        let t = injected(|x| -x / 8.0);
        let cfg = BemConfig::new(0.01);
        let v = asymptotic_variance(&m, &t, &cfg, 0.0, 100_000, 100, 1).unwrap();
        assert!((v.value - 1.0 / 64.0).abs() < 1e-12);
        assert_eq!(v.clamped_steps, 0);
        let q = variance_grid_quadrature(&m, &t).unwrap();
        assert!((q.value - 1.0 / 64.0).abs() < 1e-12);
        let p = predictable_variation(&m, &t, &BemConfig::new(0.1), 0.0, 10, 1).unwrap();
        assert!((p.value - 1.0 / 64.0).abs() < 1e-12);
        assert!(asymptotic_variance(&m, &t, &cfg, 0.0, 1000, 0, 1).is_err());
    }

    #[test]
    fn zero_diffusion_gives_zero_variance_and_martingale() {
        let m = SdeModel::ornstein_uhlenbeck(8.0, 0.0).unwrap();
        let t = injected(|x| -x / 8.0);
        let v = asymptotic_variance(&m, &t, &BemConfig::new(0.01), 1.0, 100_000, 0, 1).unwrap();
        assert_eq!(v.value, 0.0);
        let h = builtin_test_function("x").unwrap();
        let d = clt_decomposition(&m, &t, &BemConfig::new(0.1), &h, 0.0, 1.0, 5, 1).unwrap();
        assert!(d.h_samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ou_martingale_variance_is_exact() {
        let t = injected(|x| -x / 8.0);
        let h = builtin_test_function("x").unwrap();
        let d = clt_decomposition(&ou(), &t, &BemConfig::new(0.05), &h, 0.0, 0.0, 2000, 9).unwrap();
        assert_eq!(d.m, 400);
        assert!(d.max_identity_gap() < 1e-10);
        let v = d.var_h();
        // Var of a sample variance of N(0, v0) with n samples: 2 v0^2 / (n - 1)
        let v0 = 1.0 / 64.0;
        let se = v0 * (2.0 / 1999.0f64).sqrt();
        assert!((v - v0).abs() < 3.0 * se, "{v}");
    }

    #[test]
    fn decomposition_z_matches_sample_deviations() {
        use crate::ergodic::{sample_deviations, ErgodicLimitEstimate};
        let t = injected(|x| -x / 8.0);
        let h = builtin_test_function("x").unwrap();
        let cfg = BemConfig::new(0.1);
        let d = clt_decomposition(&ou(), &t, &cfg, &h, 0.0, 0.3, 20, 4).unwrap();
        let b = sample_deviations(&ou(), &cfg, &h, &[0.3], 2.0, 20, &ErgodicLimitEstimate::exact(0.0), 4).unwrap();
        for (a, b) in d.z_samples.iter().zip(&b.samples) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
