//! Backward Euler-Maruyama stepping and path simulation.
//!
//! One BEM step solves the implicit equation
//!
//! ```text
//! y - tau * b(y) = x + sigma(x) dW
//! ```
//!
//! for `y`. For a drift with one-sided Lipschitz constant `-c1 < 0` the map
//! `y -> y - tau b(y)` is strongly monotone, so the root is unique and damped
//! Newton started from the explicit predictor converges.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolverSite};
use crate::model::SdeModel;
use crate::parallel::{map_chunks, map_indexed};
use crate::rng::{aggregate_increments, derive_stream, GaussianStream};

/// Step size and implicit-solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BemConfig {
    pub tau: f64,
    /// Residual tolerance is `newton_tol * (1 + |x|)`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Smallest line-search factor before giving up.
    pub damping_min: f64,
}

impl BemConfig {
    pub fn new(tau: f64) -> Self {
        Self { tau, newton_tol: 1e-12, newton_max_iter: 50, damping_min: 2f64.powi(-20) }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::config(format!("newton_tol must be positive, got {}", self.newton_tol)));
        }
        if self.newton_max_iter < 1 {
            return Err(Error::config("newton_max_iter must be at least 1"));
        }
        if !(self.damping_min > 0.0 && self.damping_min < 1.0) {
            return Err(Error::config(format!("damping_min must lie in (0, 1), got {}", self.damping_min)));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the step-size guard: built-in models
    /// with super-linear drift refuse `tau >= 1`.
    pub fn validate_for(&self, model: &SdeModel) -> Result<()> {
        self.validate()?;
        if model.is_builtin() && model.growth_hint() > 1 && self.tau >= 1.0 {
            return Err(Error::config(format!(
                "tau = {} is too large for the super-linear model {}; use tau < 1",
                self.tau,
                model.name()
            )));
        }
        Ok(())
    }

    #[inline]
    fn tolerance(&self, x_norm: f64) -> f64 {
        self.newton_tol * (1.0 + x_norm)
    }
}

/// Result of one implicit step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Newton bookkeeping for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Aggregate solver statistics over many steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub steps: u64,
    pub newton_iterations: u64,
    pub max_iterations: usize,
    pub max_residual: f64,
}

impl SolverStats {
    #[inline]
    pub fn record(&mut self, s: StepStats) {
        self.steps += 1;
        self.newton_iterations += s.iterations as u64;
        self.max_iterations = self.max_iterations.max(s.iterations);
        self.max_residual = self.max_residual.max(s.residual_norm);
    }

    pub fn merge(&mut self, other: &SolverStats) {
        self.steps += other.steps;
        self.newton_iterations += other.newton_iterations;
        self.max_iterations = self.max_iterations.max(other.max_iterations);
        self.max_residual = self.max_residual.max(other.max_residual);
    }
}

fn solver_error(reason: impl Into<String>, iterations: usize, residual: f64) -> Error {
    Error::Solver { site: SolverSite::default(), reason: reason.into(), iterations, residual }
}

/// Reusable implicit-step solver with scratch buffers.
pub struct BemStepper<'m> {
    model: &'m SdeModel,
    cfg: BemConfig,
    sigma: Vec<f64>,
    rhs: Vec<f64>,
    drift: Vec<f64>,
    jac: Vec<f64>,
    resid: Vec<f64>,
    trial: Vec<f64>,
    trial_resid: Vec<f64>,
}

impl<'m> BemStepper<'m> {
    pub fn new(model: &'m SdeModel, cfg: BemConfig) -> Self {
        let (d, m) = (model.state_dim(), model.noise_dim());
        Self {
            model,
            cfg,
            sigma: vec![0.0; d * m],
            rhs: vec![0.0; d],
            drift: vec![0.0; d],
            jac: vec![0.0; d * d],
            resid: vec![0.0; d],
            trial: vec![0.0; d],
            trial_resid: vec![0.0; d],
        }
    }

    pub fn config(&self) -> &BemConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SdeModel {
        self.model
    }

    /// Solve `y - tau b(y) = rhs` for scalar models.
    #[inline]
    pub fn solve_scalar(&self, x: f64, rhs: f64) -> Result<(f64, StepStats)> {
        let model = self.model;
        let tau = self.cfg.tau;
        let tol = self.cfg.tolerance(x.abs());
        let residual = |y: f64| y - tau * model.drift1(y) - rhs;

        let mut y = rhs + tau * model.drift1(x);
        let mut f = residual(y);
        if !f.is_finite() {
            y = rhs;
            f = residual(y);
            if !f.is_finite() {
                return Err(solver_error("non-finite drift at the Newton start", 0, f64::INFINITY));
            }
        }
        let mut iterations = 0;
        while f.abs() > tol {
            if iterations >= self.cfg.newton_max_iter {
                return Err(solver_error("Newton did not converge", iterations, f.abs()));
            }
            iterations += 1;
            let jac = 1.0 - tau * model.drift1_prime(y);
            let delta = f / jac;
            let mut lambda = 1.0;
            loop {
                let y_new = y - lambda * delta;
                let f_new = residual(y_new);
                if f_new.is_finite() && f_new.abs() < f.abs() {
                    y = y_new;
                    f = f_new;
                    break;
                }
                lambda *= 0.5;
                if lambda < self.cfg.damping_min {
                    return Err(solver_error("line search exhausted", iterations, f.abs()));
                }
            }
        }
        Ok((y, StepStats { iterations, residual_norm: f.abs() }))
    }

    /// One BEM step from `x` with increment `dw`, written into `out`.
    pub fn step(&mut self, x: &[f64], dw: &[f64], out: &mut [f64]) -> Result<StepStats> {
        let model = self.model;
        if model.is_scalar() {
            let rhs = x[0] + model.diffusion1(x[0]) * dw[0];
            let (y, stats) = self.solve_scalar(x[0], rhs)?;
            out[0] = y;
            return Ok(stats);
        }
        let (d, m) = (model.state_dim(), model.noise_dim());
        model.diffusion(x, &mut self.sigma);
        for i in 0..d {
            self.rhs[i] = x[i] + (0..m).map(|j| self.sigma[i * m + j] * dw[j]).sum::<f64>();
        }
        self.solve_vector(x, out)
    }

    fn solve_vector(&mut self, x: &[f64], y: &mut [f64]) -> Result<StepStats> {
        let model = self.model;
        let d = model.state_dim();
        let tau = self.cfg.tau;
        let tol = self.cfg.tolerance(norm(x));

        model.drift(x, &mut self.drift);
        for i in 0..d {
            y[i] = self.rhs[i] + tau * self.drift[i];
        }
        let mut f = self.residual_into(y, false);
        if !f.is_finite() {
            y.copy_from_slice(&self.rhs);
            f = self.residual_into(y, false);
            if !f.is_finite() {
                return Err(solver_error("non-finite drift at the Newton start", 0, f64::INFINITY));
            }
        }
        let mut iterations = 0;
        while f > tol {
            if iterations >= self.cfg.newton_max_iter {
                return Err(solver_error("Newton did not converge", iterations, f));
            }
            iterations += 1;
            model.drift_jacobian(y, &mut self.jac);
            let jm = DMatrix::from_fn(d, d, |i, j| (if i == j { 1.0 } else { 0.0 }) - tau * self.jac[i * d + j]);
            let rv = DVector::from_column_slice(&self.resid);
            let delta = jm
                .lu()
                .solve(&rv)
                .ok_or_else(|| solver_error("singular Newton matrix", iterations, f))?;
            let mut lambda = 1.0;
            loop {
                for i in 0..d {
                    self.trial[i] = y[i] - lambda * delta[i];
                }
                let trial = std::mem::take(&mut self.trial);
                let f_new = self.residual_into(&trial, true);
                self.trial = trial;
                if f_new.is_finite() && f_new < f {
                    y.copy_from_slice(&self.trial);
                    self.resid.copy_from_slice(&self.trial_resid);
                    f = f_new;
                    break;
                }
                lambda *= 0.5;
                if lambda < self.cfg.damping_min {
                    return Err(solver_error("line search exhausted", iterations, f));
                }
            }
        }
        Ok(StepStats { iterations, residual_norm: f })
    }

    // residual y - tau b(y) - rhs into `resid` (or `trial_resid`); returns its norm
    fn residual_into(&mut self, y: &[f64], trial: bool) -> f64 {
        self.model.drift(y, &mut self.drift);
        let tau = self.cfg.tau;
        let target = if trial { &mut self.trial_resid } else { &mut self.resid };
        for i in 0..y.len() {
            target[i] = y[i] - tau * self.drift[i] - self.rhs[i];
        }
        norm(target)
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One BEM step.
pub fn bem_step(model: &SdeModel, cfg: &BemConfig, x: &[f64], dw: &[f64]) -> Result<StepOutcome> {
    cfg.validate()?;
    check_dims(model, x, dw)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite state {x:?}")));
    }
    let mut stepper = BemStepper::new(model, *cfg);
    let mut out = vec![0.0; model.state_dim()];
    let stats = stepper.step(x, dw, &mut out)?;
    Ok(StepOutcome { state: out, iterations: stats.iterations, residual_norm: stats.residual_norm })
}

fn check_dims(model: &SdeModel, x: &[f64], dw: &[f64]) -> Result<()> {
    if x.len() != model.state_dim() || dw.len() != model.noise_dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: state {} (model d = {}), increment {} (model D = {})",
            x.len(),
            model.state_dim(),
            dw.len(),
            model.noise_dim()
        )));
    }
    Ok(())
}

/// Explicit Euler-Maruyama step `x + tau b(x) + sigma(x) dW`.
pub fn em_step(model: &SdeModel, tau: f64, x: &[f64], dw: &[f64]) -> Vec<f64> {
    let (d, m) = (model.state_dim(), model.noise_dim());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    model.drift(x, &mut b);
    model.diffusion(x, &mut s);
    (0..d)
        .map(|i| x[i] + tau * b[i] + (0..m).map(|j| s[i * m + j] * dw[j]).sum::<f64>())
        .collect()
}

/// A single BEM trajectory advanced one step at a time.
pub struct PathSimulator<'m> {
    stepper: BemStepper<'m>,
    state: Vec<f64>,
    next: Vec<f64>,
    dw: Vec<f64>,
    index: u64,
    stats: SolverStats,
}

impl<'m> PathSimulator<'m> {
    pub fn new(model: &'m SdeModel, cfg: &BemConfig, x0: &[f64]) -> Result<Self> {
        cfg.validate_for(model)?;
        if x0.len() != model.state_dim() {
            return Err(Error::contract(format!(
                "initial state has dimension {}, model expects {}",
                x0.len(),
                model.state_dim()
            )));
        }
        Ok(Self {
            stepper: BemStepper::new(model, *cfg),
            state: x0.to_vec(),
            next: vec![0.0; x0.len()],
            dw: vec![0.0; model.noise_dim()],
            index: 0,
            stats: SolverStats::default(),
        })
    }

    /// Current state `X_n`.
    #[inline]
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Step index `n` of the current state.
    #[inline]
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Increment used by the most recent step.
    #[inline]
    pub fn last_increment(&self) -> &[f64] {
        &self.dw
    }

    pub fn stats(&self) -> SolverStats {
        self.stats
    }

    pub fn tau(&self) -> f64 {
        self.stepper.cfg.tau
    }

    /// Draw `dW ~ N(0, tau I)` from `stream` and step.
    #[inline]
    pub fn advance(&mut self, stream: &mut GaussianStream) -> Result<()> {
        let tau = self.stepper.cfg.tau;
        stream.fill_increments(tau, &mut self.dw);
        self.step_current()
    }

    /// Step with a caller-supplied increment.
    #[inline]
    pub fn advance_with(&mut self, dw: &[f64]) -> Result<()> {
        self.dw.copy_from_slice(dw);
        self.step_current()
    }

    #[inline]
    fn step_current(&mut self) -> Result<()> {
        let stats = self
            .stepper
            .step(&self.state, &self.dw, &mut self.next)
            .map_err(|e| e.at_step(self.index))?;
        self.stats.record(stats);
        std::mem::swap(&mut self.state, &mut self.next);
        self.index += 1;
        Ok(())
    }
}

/// Simulate `n_steps` BEM steps, calling `visit(n, X_n)` for `n = 0..=n_steps`.
/// Memory use is independent of `n_steps`. Returns the final state.
pub fn simulate_path(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    n_steps: u64,
    stream: &mut GaussianStream,
    mut visit: impl FnMut(u64, &[f64]),
) -> Result<Vec<f64>> {
    let mut sim = PathSimulator::new(model, cfg, x0)?;
    visit(0, sim.state());
    for _ in 0..n_steps {
        sim.advance(stream)?;
        visit(sim.index(), sim.state());
    }
    Ok(sim.state().to_vec())
}

/// Simulate and keep every state `X_0..=X_n`.
pub fn record_path(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    n_steps: u64,
    stream: &mut GaussianStream,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n_steps as usize + 1);
    simulate_path(model, cfg, x0, n_steps, stream, |_, x| out.push(x.to_vec()))?;
    Ok(out)
}

/// Two BEM paths driven by the same increments, one draw per step.
/// `visit(n, X_n, Y_n)` is called for `n = 0..=n_steps`.
pub fn simulate_coupled_pair(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    y0: &[f64],
    n_steps: u64,
    stream: &mut GaussianStream,
    mut visit: impl FnMut(u64, &[f64], &[f64]),
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = PathSimulator::new(model, cfg, x0)?;
    let mut b = PathSimulator::new(model, cfg, y0)?;
    let mut dw = vec![0.0; model.noise_dim()];
    visit(0, a.state(), b.state());
    for _ in 0..n_steps {
        stream.fill_increments(cfg.tau, &mut dw);
        a.advance_with(&dw)?;
        b.advance_with(&dw)?;
        visit(a.index(), a.state(), b.state());
    }
    Ok((a.state().to_vec(), b.state().to_vec()))
}

/// Strong error of one coarse step size against the fine reference.
#[derive(Debug, Clone, Serialize)]
pub struct StrongErrorPoint {
    pub tau: f64,
    /// sup over coarse grid times of the root-mean-square error
    pub rms_sup: f64,
    /// grid time at which the supremum is attained
    pub t_at_sup: f64,
    pub ratio: usize,
}

fn integer_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-9 * k.max(1.0) {
        return Err(Error::config(format!("{what}: {num} is not an integer multiple of {den}")));
    }
    Ok(k as usize)
}

/// Self-convergence of BEM: every coarse path reuses the Brownian path of a
/// fine reference at `tau_ref` through increment aggregation.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_profile(
    model: &SdeModel,
    base: &BemConfig,
    taus: &[f64],
    tau_ref: f64,
    horizon: f64,
    x0: &[f64],
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<StrongErrorPoint>> {
    if taus.is_empty() || n_paths == 0 {
        return Err(Error::config("strong_error_profile needs at least one tau and one path"));
    }
    let ref_cfg = base.with_tau(tau_ref);
    ref_cfg.validate_for(model)?;
    let n_ref = integer_ratio(horizon, tau_ref, "horizon / tau_ref")?;
    let mut ratios = Vec::with_capacity(taus.len());
    for &tau in taus {
        base.with_tau(tau).validate_for(model)?;
        let ratio = integer_ratio(tau, tau_ref, "tau / tau_ref")?;
        integer_ratio(horizon, tau, "horizon / tau")?;
        ratios.push(ratio);
    }
    let m = model.noise_dim();

    // per path: squared error at every coarse grid point, for every tau
    let per_path: Vec<Vec<Vec<f64>>> = map_indexed(n_paths, |p| {
        let mut stream = derive_stream(master_seed, p as u64);
        let mut fine = vec![0.0; n_ref * m];
        stream.fill_increments(tau_ref, &mut fine);
        let mut reference = Vec::with_capacity(n_ref + 1);
        let mut sim = PathSimulator::new(model, &ref_cfg, x0).map_err(|e| e.on_path(p as u64))?;
        reference.push(sim.state().to_vec());
        for k in 0..n_ref {
            sim.advance_with(&fine[k * m..(k + 1) * m]).map_err(|e| e.on_path(p as u64))?;
            reference.push(sim.state().to_vec());
        }
        ratios
            .iter()
            .zip(taus)
            .map(|(&ratio, &tau)| {
                let coarse = aggregate_increments(&fine, m, ratio)?;
                let n_coarse = n_ref / ratio;
                let mut sq = Vec::with_capacity(n_coarse + 1);
                let mut sim = PathSimulator::new(model, &base.with_tau(tau), x0)?;
                for k in 0..=n_coarse {
                    let r = &reference[k * ratio];
                    sq.push(sim.state().iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
                    if k < n_coarse {
                        sim.advance_with(&coarse[k * m..(k + 1) * m]).map_err(|e| e.on_path(p as u64))?;
                    }
                }
                Ok(sq)
            })
            .collect()
    })?;

    let mut points = Vec::with_capacity(taus.len());
    for (t, (&tau, &ratio)) in taus.iter().zip(&ratios).enumerate() {
        let n_grid = n_ref / ratio + 1;
        let mut best = (0.0f64, 0.0f64);
        for k in 0..n_grid {
            let ms = per_path.iter().map(|p| p[t][k]).sum::<f64>() / n_paths as f64;
            let rms = ms.sqrt();
            if rms > best.0 {
                best = (rms, k as f64 * tau);
            }
        }
        points.push(StrongErrorPoint { tau, rms_sup: best.0, t_at_sup: best.1, ratio });
    }
    Ok(points)
}

/// Paths per parallel work unit in the profile routines below.
const PATHS_PER_CHUNK: usize = 25;

/// Running absolute moments `E|X_n|^p`, `n = 0..=n_steps`, one vector per
/// entry of `p_list`, averaged over `n_paths` paths from `x0`.
#[allow(clippy::too_many_arguments)]
pub fn moment_profile(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    n_steps: u64,
    p_list: &[u32],
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate_for(model)?;
    if n_paths == 0 || p_list.is_empty() {
        return Err(Error::config("moment profile needs at least one path and one moment order"));
    }
    let len = n_steps as usize + 1;
    let partials = map_chunks(n_paths, PATHS_PER_CHUNK, |range| {
        let mut acc = vec![vec![0.0; len]; p_list.len()];
        for p in range {
            let mut stream = derive_stream(master_seed, p as u64);
            simulate_path(model, cfg, x0, n_steps, &mut stream, |n, x| {
                let r = norm(x);
                for (slot, &q) in acc.iter_mut().zip(p_list) {
                    slot[n as usize] += r.powi(q as i32);
                }
            })
            .map_err(|e| e.on_path(p as u64))?;
        }
        Ok(acc)
    })?;
    let mut out = vec![vec![0.0; len]; p_list.len()];
    for part in &partials {
        for (o, a) in out.iter_mut().zip(part) {
            o.iter_mut().zip(a).for_each(|(o, a)| *o += a);
        }
    }
    out.iter_mut().flatten().for_each(|v| *v /= n_paths as f64);
    Ok(out)
}

/// Mean squared distance of coupled pairs per step, with the standard error
/// of each one-step change `|d_{n+1}|^2 - |d_n|^2` across pairs.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionProfile {
    pub mean_sq: Vec<f64>,
    /// entry n belongs to the change from step n to n + 1
    pub change_stderr: Vec<f64>,
}

impl ContractionProfile {
    /// Steps where the mean increases by more than `k` standard errors of
    /// the change.
    pub fn significant_increases(&self, k: f64) -> Vec<usize> {
        (0..self.change_stderr.len())
            .filter(|&n| self.mean_sq[n + 1] - self.mean_sq[n] > k * self.change_stderr[n])
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.mean_sq.windows(2).all(|w| w[1] <= w[0])
    }
}

/// `E|X_n - Y_n|^2`, `n = 0..=n_steps`, for coupled pairs started at `x0`
/// and `y0` under common noise.
#[allow(clippy::too_many_arguments)]
pub fn contraction_profile(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    y0: &[f64],
    n_steps: u64,
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<f64>> {
    contraction_profile_with_errors(model, cfg, x0, y0, n_steps, n_paths, master_seed).map(|p| p.mean_sq)
}

#[allow(clippy::too_many_arguments)]
pub fn contraction_profile_with_errors(
    model: &SdeModel,
    cfg: &BemConfig,
    x0: &[f64],
    y0: &[f64],
    n_steps: u64,
    n_paths: usize,
    master_seed: u64,
) -> Result<ContractionProfile> {
    cfg.validate_for(model)?;
    if n_paths == 0 {
        return Err(Error::config("contraction profile needs at least one pair"));
    }
    let len = n_steps as usize + 1;
    // per chunk: sums of d^2, of the change and of the squared change
    let partials = map_chunks(n_paths, PATHS_PER_CHUNK, |range| {
        let mut acc = vec![[0.0; 3]; len];
        for p in range {
            let mut stream = derive_stream(master_seed, p as u64);
            let mut prev = 0.0;
            simulate_coupled_pair(model, cfg, x0, y0, n_steps, &mut stream, |n, a, b| {
                let d2 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
                let slot = &mut acc[n as usize];
                slot[0] += d2;
                if n > 0 {
                    let c = d2 - prev;
                    let back = &mut acc[n as usize - 1];
                    back[1] += c;
                    back[2] += c * c;
                }
                prev = d2;
            })
            .map_err(|e| e.on_path(p as u64))?;
        }
        Ok(acc)
    })?;
    let mut total = vec![[0.0; 3]; len];
    for part in &partials {
        for (t, a) in total.iter_mut().zip(part) {
            (0..3).for_each(|i| t[i] += a[i]);
        }
    }
    let m = n_paths as f64;
    let mean_sq = total.iter().map(|t| t[0] / m).collect();
    let change_stderr = total[..len - 1]
        .iter()
        .map(|t| {
            if n_paths < 2 {
                return 0.0;
            }
            let mean = t[1] / m;
            let var = ((t[2] - m * mean * mean) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(ContractionProfile { mean_sq, change_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SdeModel;
    use crate::rng::derive_stream;

    fn brownian() -> SdeModel {
        SdeModel::scalar("brownian", 1, |_| 0.0, |_| 1.0)
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_drift_step_is_explicit() {
        let out = bem_step(&brownian(), &BemConfig::new(0.1), &[0.3], &[0.2]).unwrap();
        assert!((out.state[0] - 0.5).abs() < 1e-15);
        assert!((em_step(&brownian(), 0.1, &[0.3], &[0.2])[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ou_step_closed_form() {
        let ou = SdeModel::ornstein_uhlenbeck(8.0, 1.0).unwrap();
        let out = bem_step(&ou, &BemConfig::new(0.1), &[1.0], &[0.0]).unwrap();
        assert!((out.state[0] - 1.0 / 1.8).abs() < 1e-14);
        let ou0 = SdeModel::ornstein_uhlenbeck(8.0, 0.0).unwrap();
        assert!((em_step(&ou0, 0.1, &[1.0], &[0.0])[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn example51_matches_bisection() {
        let m = SdeModel::example51();
        // rhs = x + sin(x) dW = 1 with x = 1, dW = 0
        let out = bem_step(&m, &BemConfig::new(0.1), &[1.0], &[0.0]).unwrap();
        let root = bisect(|y| 0.1 * y * y * y + 1.8 * y - 1.0, 0.0, 1.0);
        assert!((out.state[0] - root).abs() < 1e-12, "{} vs {root}", out.state[0]);
        assert!(out.residual_norm <= 1e-12 * 2.0);
    }

    #[test]
    fn newton_agrees_with_bisection_on_random_triples() {
        let mut s = derive_stream(12, 0);
        for model in [SdeModel::example51(), SdeModel::example52()] {
            for _ in 0..1000 {
                let x = 6.0 * (s.uniform() - 0.5);
                let dw = s.standard_normal();
                let tau = 0.5 * s.uniform() + 1e-4;
                let cfg = BemConfig::new(tau);
                let out = bem_step(&model, &cfg, &[x], &[dw]).unwrap();
                let rhs = x + model.diffusion1(x) * dw;
                let g = |y: f64| y - tau * model.drift1(y) - rhs;
                let bound = rhs.abs() + 1.0;
                let root = bisect(g, -bound, bound);
                assert!((out.state[0] - root).abs() < 1e-10, "x={x} dw={dw} tau={tau}");
                assert!(out.residual_norm <= cfg.newton_tol * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn vector_newton_solves_coupled_system() {
        // d = 2, D = 1 cubic drift with coupling
        struct Coupled;
        impl crate::model::Coefficients for Coupled {
            fn drift(&self, x: &[f64], out: &mut [f64]) {
                out[0] = -x[0].powi(3) - 2.0 * x[0] + 0.5 * x[1];
                out[1] = -x[1].powi(3) - 2.0 * x[1] - 0.5 * x[0];
            }
            fn diffusion(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 0.3 * x[1].sin();
                out[1] = 0.2;
            }
        }
        let m = SdeModel::custom("coupled", 2, 1, 3, std::sync::Arc::new(Coupled)).unwrap();
        let cfg = BemConfig::new(0.2);
        let x = [1.5, -2.0];
        let out = bem_step(&m, &cfg, &x, &[0.3]).unwrap();
        let mut b = [0.0; 2];
        m.drift(&out.state, &mut b);
        let mut s = [0.0; 2];
        m.diffusion(&x, &mut s);
        for i in 0..2 {
            let r = out.state[i] - cfg.tau * b[i] - (x[i] + s[i] * 0.3);
            assert!(r.abs() < 1e-11, "component {i} residual {r}");
        }
    }

    #[test]
    fn config_validation() {
        let m = SdeModel::example51();
        assert!(BemConfig::new(0.0).validate().is_err());
        assert!(BemConfig::new(1.0).validate_for(&m).is_err());
        let mut c = BemConfig::new(0.1);
        c.newton_max_iter = 0;
        assert!(c.validate().is_err());
        // OU is linear: no step-size guard
        assert!(BemConfig::new(2.0).validate_for(&SdeModel::ornstein_uhlenbeck(1.0, 1.0).unwrap()).is_ok());
    }

    #[test]
    fn solver_failure_reports_residual() {
        // y - tau e^y = rhs has no root once rhs > ln(1/tau) - 1
        let m = SdeModel::scalar("unstable", 3, f64::exp, |_| 0.0);
        let err = bem_step(&m, &BemConfig::new(0.5), &[10.0], &[0.0]).unwrap_err();
        match err {
            Error::Solver { residual, .. } => assert!(residual > 0.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_steps_and_deterministic_decay() {
        let ou = SdeModel::ornstein_uhlenbeck(8.0, 0.0).unwrap();
        let cfg = BemConfig::new(0.1);
        let mut s = derive_stream(0, 0);
        assert_eq!(record_path(&ou, &cfg, &[2.0], 0, &mut s).unwrap(), vec![vec![2.0]]);
        let path = record_path(&ou, &cfg, &[2.0], 10, &mut s).unwrap();
        for (n, x) in path.iter().enumerate() {
            let exact = 2.0 / 1.8f64.powi(n as i32);
            assert!((x[0] - exact).abs() < 1e-13 * exact.max(1.0));
        }
    }

    #[test]
    fn solver_error_carries_step_index() {
        let m = SdeModel::scalar("blowup", 3, f64::exp, |_| 1.0);
        let mut s = derive_stream(1, 0);
        let err = simulate_path(&m, &BemConfig::new(0.5), &[3.0], 100, &mut s, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Solver { site: SolverSite { step: Some(_), .. }, .. }));
    }

    #[test]
    fn explicit_em_blows_up_where_bem_does_not() {
        let m = SdeModel::example51();
        let tau = 0.5;
        let mut blew_up = 0;
        for p in 0..20 {
            let mut s = derive_stream(77, p);
            let mut x = 3.0;
            let mut y = 3.0;
            let cfg = BemConfig::new(tau);
            for _ in 0..50 {
                let dw = sample_dw(&mut s, tau);
                x = em_step(&m, tau, &[x], &[dw])[0];
                y = bem_step(&m, &cfg, &[y], &[dw]).unwrap().state[0];
                if !x.is_finite() || x.abs() > 1e100 {
                    break;
                }
            }
            if !x.is_finite() || x.abs() > 1e100 {
                blew_up += 1;
            }
            assert!(y.abs() < 10.0);
        }
        assert!(blew_up > 0);
    }

    fn sample_dw(s: &mut GaussianStream, tau: f64) -> f64 {
        tau.sqrt() * s.standard_normal()
    }

    #[test]
    fn coupled_pair_identical_and_contracting() {
        let m = SdeModel::example51();
        let cfg = BemConfig::new(0.01);
        let mut s = derive_stream(3, 0);
        simulate_coupled_pair(&m, &cfg, &[0.7], &[0.7], 100, &mut s, |_, a, b| assert_eq!(a, b)).unwrap();

        let ou = SdeModel::ornstein_uhlenbeck(8.0, 1.0).unwrap();
        let mut s = derive_stream(3, 1);
        simulate_coupled_pair(&ou, &cfg, &[2.0], &[-1.0], 50, &mut s, |n, a, b| {
            let exact = 3.0 / 1.08f64.powi(n as i32);
            assert!(((a[0] - b[0]) - exact).abs() < 1e-12);
        })
        .unwrap();
    }

    #[test]
    fn strong_error_self_comparison_is_zero() {
        let m = SdeModel::example51();
        let tau_ref = 2f64.powi(-8);
        let pts = strong_error_profile(&m, &BemConfig::new(tau_ref), &[tau_ref], tau_ref, 1.0, &[1.0], 8, 1).unwrap();
        assert_eq!(pts[0].rms_sup, 0.0);
    }

    #[test]
    fn strong_error_rejects_non_multiples() {
        let m = SdeModel::example51();
        let err = strong_error_profile(&m, &BemConfig::new(0.01), &[0.015], 0.01, 1.0, &[1.0], 4, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ou_deterministic_profiles() {
        let ou = SdeModel::ornstein_uhlenbeck(8.0, 0.0).unwrap();
        let cfg = BemConfig::new(0.1);
        let m = moment_profile(&ou, &cfg, &[1.0], 5, &[2], 3, 1).unwrap();
        for (n, v) in m[0].iter().enumerate() {
            assert!((v - 1.8f64.powi(-2 * n as i32)).abs() < 1e-14);
        }
        let c = contraction_profile(&ou, &cfg, &[2.0], &[-2.0], 5, 3, 1).unwrap();
        for (n, v) in c.iter().enumerate() {
            assert!((v - 16.0 * 1.8f64.powi(-2 * n as i32)).abs() < 1e-12);
        }
    }
}
