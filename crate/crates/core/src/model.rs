//! SDE problem definitions, built-in examples and assumption probes.
//!
//! A model is `dX = b(X) dt + sigma(X) dW` with `X` in R^d and `W` a
//! D-dimensional Brownian motion. Matrices are stored row-major: the drift
//! Jacobian is d x d, the diffusion is d x D, and the diffusion Jacobian is
//! laid out as `[i][j][k] = d sigma_ij / d x_k`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::derive_stream;

/// User-supplied coefficients for a custom model.
pub trait Coefficients: Send + Sync {
    fn drift(&self, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    /// Analytic drift Jacobian. Returning `false` selects the
    /// central-difference fallback.
    fn drift_jacobian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

struct ScalarCoefficients {
    drift: ScalarFn,
    diffusion: ScalarFn,
    drift_prime: Option<ScalarFn>,
}

impl Coefficients for ScalarCoefficients {
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.drift)(x[0]);
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion)(x[0]);
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.drift_prime {
            Some(d) => {
                out[0] = d(x[0]);
                true
            }
            None => false,
        }
    }
}

#[derive(Clone)]
enum Kind {
    /// b(x) = -(x^3 + 8x), sigma(x) = sin x
    Example51,
    /// b(x) = -(x^3 + 10x), sigma(x) = x^2 / 2
    Example52,
    /// b(x) = -theta x, sigma(x) = s
    Ou { theta: f64, s: f64 },
    Custom(Arc<dyn Coefficients>),
}

/// An SDE with drift, diffusion and Jacobian evaluators.
///
/// Models are immutable and cheap to clone; evaluators are pure.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    state_dim: usize,
    noise_dim: usize,
    growth_hint: u32,
    kind: Kind,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("growth_hint", &self.growth_hint)
            .finish()
    }
}

impl SdeModel {
    pub fn example51() -> Self {
        Self { name: "example51".into(), state_dim: 1, noise_dim: 1, growth_hint: 3, kind: Kind::Example51 }
    }

    pub fn example52() -> Self {
        Self { name: "example52".into(), state_dim: 1, noise_dim: 1, growth_hint: 3, kind: Kind::Example52 }
    }

    pub fn ornstein_uhlenbeck(theta: f64, s: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::config(format!("ou requires theta > 0, got {theta}")));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::config(format!("ou requires s >= 0, got {s}")));
        }
        Ok(Self {
            name: format!("ou(theta={theta},s={s})"),
            state_dim: 1,
            noise_dim: 1,
            growth_hint: 1,
            kind: Kind::Ou { theta, s },
        })
    }

    /// Register a custom model.
    pub fn custom(
        name: impl Into<String>,
        state_dim: usize,
        noise_dim: usize,
        growth_hint: u32,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if state_dim == 0 || noise_dim == 0 {
            return Err(Error::config("state and noise dimensions must be positive"));
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            noise_dim,
            growth_hint: growth_hint.max(1),
            kind: Kind::Custom(coefficients),
        })
    }

    /// One-dimensional custom model from closures. The drift derivative is
    /// taken by central differences.
    pub fn scalar(
        name: impl Into<String>,
        growth_hint: u32,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let coeffs = ScalarCoefficients { drift: Arc::new(drift), diffusion: Arc::new(diffusion), drift_prime: None };
        Self {
            name: name.into(),
            state_dim: 1,
            noise_dim: 1,
            growth_hint: growth_hint.max(1),
            kind: Kind::Custom(Arc::new(coeffs)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Polynomial order of the drift (approximates the growth order q).
    pub fn growth_hint(&self) -> u32 {
        self.growth_hint
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self.kind, Kind::Custom(_))
    }

    pub fn is_scalar(&self) -> bool {
        self.state_dim == 1 && self.noise_dim == 1
    }

    /// Known one-sided dissipativity constant for built-ins.
    pub fn dissipativity_hint(&self) -> Option<f64> {
        match self.kind {
            Kind::Example51 => Some(8.0),
            Kind::Example52 => Some(10.0),
            Kind::Ou { theta, .. } => Some(theta),
            Kind::Custom(_) => None,
        }
    }

    /// Structural warnings, e.g. a diffusion that is not globally bounded.
    pub fn warnings(&self) -> Vec<String> {
        match self.kind {
            Kind::Example52 => vec![
                "diffusion 0.5x^2 is unbounded and not globally Lipschitz; bounded-diffusion assumption does not hold"
                    .to_string(),
            ],
            _ => Vec::new(),
        }
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Custom(c) => c.drift(x, out),
            _ => out[0] = self.drift1(x[0]),
        }
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Custom(c) => c.diffusion(x, out),
            _ => out[0] = self.diffusion1(x[0]),
        }
    }

    /// Drift Jacobian (row-major d x d): analytic when available, central
    /// differences otherwise.
    pub fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Custom(c) => {
                if !c.drift_jacobian(x, out) {
                    self.fd_drift_jacobian(x, out);
                }
            }
            _ => out[0] = self.drift1_prime(x[0]),
        }
    }

    /// Central-difference drift Jacobian with step `max(1e-6, 1e-6 |x_j|)`.
    pub fn fd_drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        let mut xp = x.to_vec();
        let mut bp = vec![0.0; d];
        let mut bm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.drift(&xp, &mut bp);
            xp[j] = x[j] - h;
            self.drift(&xp, &mut bm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (bp[i] - bm[i]) / (2.0 * h);
            }
        }
    }

    /// Diffusion Jacobian, layout `[i][j][k] = d sigma_ij / d x_k`.
    pub fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Custom(_) => {
                let (d, m) = (self.state_dim, self.noise_dim);
                let mut xp = x.to_vec();
                let mut sp = vec![0.0; d * m];
                let mut sm = vec![0.0; d * m];
                for k in 0..d {
                    let h = fd_step(x[k]);
                    xp[k] = x[k] + h;
                    self.diffusion(&xp, &mut sp);
                    xp[k] = x[k] - h;
                    self.diffusion(&xp, &mut sm);
                    xp[k] = x[k];
                    for ij in 0..d * m {
                        out[ij * d + k] = (sp[ij] - sm[ij]) / (2.0 * h);
                    }
                }
            }
            _ => out[0] = self.diffusion1_prime(x[0]),
        }
    }

    // Scalar fast paths. Valid only for d = D = 1.

    #[inline]
    pub fn drift1(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Example51 => -(x * x * x + 8.0 * x),
            Kind::Example52 => -(x * x * x + 10.0 * x),
            Kind::Ou { theta, .. } => -theta * x,
            Kind::Custom(c) => {
                let mut out = [0.0];
                c.drift(&[x], &mut out);
                out[0]
            }
        }
    }

    #[inline]
    pub fn drift1_prime(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Example51 => -(3.0 * x * x + 8.0),
            Kind::Example52 => -(3.0 * x * x + 10.0),
            Kind::Ou { theta, .. } => -theta,
            Kind::Custom(c) => {
                let mut out = [0.0];
                if !c.drift_jacobian(&[x], &mut out) {
                    let h = fd_step(x);
                    out[0] = (self.drift1(x + h) - self.drift1(x - h)) / (2.0 * h);
                }
                out[0]
            }
        }
    }

    #[inline]
    pub fn diffusion1(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Example51 => x.sin(),
            Kind::Example52 => 0.5 * x * x,
            Kind::Ou { s, .. } => *s,
            Kind::Custom(c) => {
                let mut out = [0.0];
                c.diffusion(&[x], &mut out);
                out[0]
            }
        }
    }

    #[inline]
    pub fn diffusion1_prime(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Example51 => x.cos(),
            Kind::Example52 => x,
            Kind::Ou { .. } => 0.0,
            Kind::Custom(_) => {
                let h = fd_step(x);
                (self.diffusion1(x + h) - self.diffusion1(x - h)) / (2.0 * h)
            }
        }
    }
}

#[inline]
pub(crate) fn fd_step(x: f64) -> f64 {
    (1e-6 * x.abs()).max(1e-6)
}

/// Look up a built-in model by identifier.
///
/// Accepted ids: `example51`, `example52`, `ou` (theta = 8, s = 1) and
/// `ou:theta=<v>,s=<v>` with either key optional.
pub fn builtin_model(name: &str) -> Result<SdeModel> {
    let name = name.trim();
    match name {
        "example51" => return Ok(SdeModel::example51()),
        "example52" => return Ok(SdeModel::example52()),
        "ou" => return SdeModel::ornstein_uhlenbeck(8.0, 1.0),
        _ => {}
    }
    if let Some(params) = name.strip_prefix("ou:") {
        let (mut theta, mut s) = (8.0, 1.0);
        for kv in params.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed ou parameter '{kv}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("ou parameter '{kv}' is not a number")))?;
            match k.trim() {
                "theta" => theta = v,
                "s" => s = v,
                other => return Err(Error::config(format!("unknown ou parameter '{other}'"))),
            }
        }
        return SdeModel::ornstein_uhlenbeck(theta, s);
    }
    Err(Error::config(format!(
        "unknown model '{name}' (expected example51, example52 or ou[:theta=..,s=..])"
    )))
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A scalar observable h (or f) with an optional gradient.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    value: ValueFn,
    gradient: Option<GradFn>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), value: Arc::new(value), gradient: None }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// Function of the first coordinate with an optional derivative.
    pub fn scalar(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
    ) -> Self {
        let tf = Self::new(name, move |x: &[f64]| f(x[0]));
        match df {
            Some(df) => tf.with_gradient(move |x: &[f64], g: &mut [f64]| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[0] = df(x[0]);
            }),
            None => tf,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const:{c}"), move |_| c).with_gradient(|_, g| g.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `a * inner + c`.
    pub fn affine(inner: &TestFunction, a: f64, c: f64) -> Self {
        let value = inner.value.clone();
        let mut tf = Self::new(format!("{a}*{}+{c}", inner.name), move |x| a * value(x) + c);
        if let Some(g) = inner.gradient.clone() {
            tf = tf.with_gradient(move |x, out| {
                g(x, out);
                out.iter_mut().for_each(|v| *v *= a);
            });
        }
        tf
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    #[inline]
    pub fn value1(&self, x: f64) -> f64 {
        (self.value)(&[x])
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Evaluate the gradient into `out`; returns `false` when none is known.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.gradient {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }
}

/// Look up a built-in test function.
///
/// Ids: `sin_plus_one`, `cos`, `sin_x6`, `x`, `x<k>` (monomial x^k), `const`
/// (the constant 1) and `const:<c>`. All act on the first coordinate.
pub fn builtin_test_function(name: &str) -> Result<TestFunction> {
    let name = name.trim();
    let tf = match name {
        "sin_plus_one" => TestFunction::scalar(name, |x| x.sin() + 1.0, Some(Box::new(|x: f64| x.cos()))),
        "cos" => TestFunction::scalar(name, f64::cos, Some(Box::new(|x: f64| -x.sin()))),
        "sin_x6" => TestFunction::scalar(
            name,
            |x| x.powi(6).sin(),
            Some(Box::new(|x: f64| 6.0 * x.powi(5) * x.powi(6).cos())),
        ),
        "x" => TestFunction::scalar(name, |x| x, Some(Box::new(|_| 1.0))),
        "const" => TestFunction::constant(1.0),
        _ => {
            if let Some(c) = name.strip_prefix("const:") {
                let c: f64 = c.parse().map_err(|_| Error::config(format!("bad constant in '{name}'")))?;
                TestFunction::constant(c)
            } else if let Some(k) = name.strip_prefix('x').and_then(|k| k.parse::<i32>().ok()) {
                if !(0..=32).contains(&k) {
                    return Err(Error::config(format!("monomial order out of range in '{name}'")));
                }
                TestFunction::scalar(
                    name,
                    move |x| x.powi(k),
                    Some(Box::new(move |x: f64| if k == 0 { 0.0 } else { k as f64 * x.powi(k - 1) })),
                )
            } else {
                return Err(Error::config(format!("unknown test function '{name}'")));
            }
        }
    };
    Ok(tf)
}

/// Empirical constants of the dissipativity and diffusion assumptions on a ball.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// inf over probed pairs of -<u-v, b(u)-b(v)> / |u-v|^2
    pub c1_hat: f64,
    /// sup over probed points of the Hilbert-Schmidt norm of sigma
    pub sigma_sup_hat: f64,
    /// sup over probed pairs of |sigma(u)-sigma(v)|_HS / |u-v|
    pub sigma_lip_hat: f64,
    pub n_probes: usize,
    pub probe_radius: f64,
    /// c1_hat > 7.5 * sigma_lip_hat^2 on the probed set
    pub dissipation_dominates: bool,
    pub warnings: Vec<String>,
}

/// Probe the one-sided dissipativity and diffusion bounds on pairs drawn
/// uniformly from the ball of radius `probe_radius`.
pub fn estimate_assumptions(
    model: &SdeModel,
    n_probes: usize,
    probe_radius: f64,
    seed: u64,
) -> Result<AssumptionReport> {
    if n_probes < 100 {
        return Err(Error::config(format!("n_probes must be >= 100, got {n_probes}")));
    }
    if !(probe_radius > 0.0 && probe_radius.is_finite()) {
        return Err(Error::config(format!("probe_radius must be positive, got {probe_radius}")));
    }
    let d = model.state_dim();
    let m = model.noise_dim();
    let mut stream = derive_stream(seed, 0);
    let mut sample_ball = |out: &mut [f64]| {
        let mut norm2 = 0.0;
        for v in out.iter_mut() {
            *v = stream.standard_normal();
            norm2 += *v * *v;
        }
        let r = probe_radius * stream.uniform().powf(1.0 / d as f64);
        let scale = if norm2 > 0.0 { r / norm2.sqrt() } else { 0.0 };
        out.iter_mut().for_each(|v| *v *= scale);
    };

    let (mut u, mut v) = (vec![0.0; d], vec![0.0; d]);
    let (mut bu, mut bv) = (vec![0.0; d], vec![0.0; d]);
    let (mut su, mut sv) = (vec![0.0; d * m], vec![0.0; d * m]);
    let mut c1_hat = f64::INFINITY;
    let mut sigma_sup: f64 = 0.0;
    let mut sigma_lip: f64 = 0.0;

    for _ in 0..n_probes {
        sample_ball(&mut u);
        sample_ball(&mut v);
        model.drift(&u, &mut bu);
        model.drift(&v, &mut bv);
        for (point, b) in [(&u, &bu), (&v, &bv)] {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diagnostic(format!("non-finite drift at probe point {point:?}")));
            }
        }
        model.diffusion(&u, &mut su);
        model.diffusion(&v, &mut sv);
        let hs = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma_sup = sigma_sup.max(hs(&su)).max(hs(&sv));

        let mut dist2 = 0.0;
        let mut inner = 0.0;
        for i in 0..d {
            let delta = u[i] - v[i];
            dist2 += delta * delta;
            inner += delta * (bu[i] - bv[i]);
        }
        if dist2 == 0.0 {
            continue;
        }
        c1_hat = c1_hat.min(-inner / dist2);
        let sdiff = su.iter().zip(&sv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        sigma_lip = sigma_lip.max(sdiff / dist2.sqrt());
    }

    let mut warnings = model.warnings();
    let dissipation_dominates = c1_hat > 7.5 * sigma_lip * sigma_lip;
    if !dissipation_dominates {
        warnings.push(format!(
            "c1_hat = {c1_hat} does not exceed 7.5 * L1^2 = {} on the probed ball",
            7.5 * sigma_lip * sigma_lip
        ));
    }
    Ok(AssumptionReport {
        c1_hat,
        sigma_sup_hat: sigma_sup,
        sigma_lip_hat: sigma_lip,
        n_probes,
        probe_radius,
        dissipation_dominates,
        warnings,
    })
}
