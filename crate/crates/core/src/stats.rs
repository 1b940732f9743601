//! Distribution and convergence analytics.

use std::cmp::Ordering;

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Neumaier-compensated running sum; the accumulated rounding error does not
/// grow with the number of terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Sample mean and standard error of the mean (sample sd / sqrt(n)).
pub fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().copied().collect::<CompensatedSum>().value() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = samples.iter().map(|x| (x - mean) * (x - mean)).collect::<CompensatedSum>().value();
    (mean, (ss / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(samples: &[f64]) -> f64 {
    let (_, se) = mean_stderr(samples);
    se * se * samples.len() as f64
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov distance to a centered normal law.
#[derive(Debug, Clone, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub n: usize,
    pub reference_variance: f64,
    pub pass_threshold: f64,
}

impl KsReport {
    pub fn passed(&self) -> bool {
        self.statistic < self.pass_threshold
    }
}

/// 99% asymptotic Kolmogorov quantile coefficient.
pub const KOLMOGOROV_99: f64 = 1.63;

/// Default verdict threshold: `slack * 1.63 / sqrt(n)` with slack 2.
pub fn default_ks_threshold(n: usize) -> f64 {
    2.0 * KOLMOGOROV_99 / (n as f64).sqrt()
}

/// `sup_x |F_n(x) - Phi(x / sqrt(variance))|`, evaluated exactly at the
/// jump points of the empirical CDF.
pub fn ks_to_normal(samples: &[f64], variance: f64) -> Result<KsReport> {
    ks_to_normal_with_threshold(samples, variance, default_ks_threshold(samples.len()))
}

pub fn ks_to_normal_with_threshold(samples: &[f64], variance: f64, pass_threshold: f64) -> Result<KsReport> {
    if samples.is_empty() {
        return Err(Error::contract("ks_to_normal needs at least one sample"));
    }
    let n = samples.len();
    if !(variance > 0.0) {
        if variance == 0.0 && samples.iter().all(|&x| x == 0.0) {
            return Ok(KsReport { statistic: 0.0, n, reference_variance: 0.0, pass_threshold });
        }
        return Err(Error::contract(format!("reference variance must be positive, got {variance}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let sd = variance.sqrt();
    let nf = n as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < n {
        // ties share one jump of the ECDF
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let cdf = normal_cdf(sorted[i] / sd);
        let below = i as f64 / nf;
        let above = (j + 1) as f64 / nf;
        d = d.max(above - cdf).max(cdf - below);
        i = j + 1;
    }
    Ok(KsReport { statistic: d.clamp(0.0, 1.0), n, reference_variance: variance, pass_threshold })
}

/// Least-squares power-law fit on log-log axes.
#[derive(Debug, Clone, Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// (ln tau, ln error)
    pub points: Vec<(f64, f64)>,
}

/// Fit `ln error = intercept + slope * ln tau`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 3 {
        return Err(Error::contract(format!("fit_order needs at least 3 points, got {}", points.len())));
    }
    if let Some(&(t, e)) = points.iter().find(|&&(t, e)| !(t > 0.0 && e > 0.0)) {
        return Err(Error::contract(format!(
            "fit_order needs positive step sizes and errors, got ({t}, {e}); floor at the noise level and mark inconclusive"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(t, e)| (t.ln(), e.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("fit_order needs at least two distinct step sizes"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(OrderFit { slope, intercept, r_squared, points: logs })
}

/// Empirical absolute moment `E|X|^p` with a batch-means standard error.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSummary {
    pub p: u32,
    pub mean: f64,
    pub stderr: f64,
}

/// Number of batches used for batch-means standard errors.
pub const DEFAULT_BATCHES: usize = 30;

/// Batch-means standard error of the mean of a (possibly correlated)
/// sequence. Falls back to the i.i.d. formula when there are too few values
/// to form `n_batches` batches of length 2.
pub fn batch_means_stderr(values: &[f64], n_batches: usize) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    if n_batches < 2 || n < 2 * n_batches {
        return mean_stderr(values).1;
    }
    let len = n / n_batches;
    let means: Vec<f64> = values
        .chunks_exact(len)
        .take(n_batches)
        .map(|c| c.iter().copied().collect::<CompensatedSum>().value() / len as f64)
        .collect();
    mean_stderr(&means).1
}

pub fn summarize(samples: &[f64], p_list: &[u32]) -> Result<Vec<MomentSummary>> {
    if samples.is_empty() {
        return Err(Error::contract("summarize needs at least one sample"));
    }
    Ok(p_list
        .iter()
        .map(|&p| {
            let powered: Vec<f64> = samples.iter().map(|x| x.abs().powi(p as i32)).collect();
            let mean = powered.iter().copied().collect::<CompensatedSum>().value() / powered.len() as f64;
            MomentSummary { p, mean, stderr: batch_means_stderr(&powered, DEFAULT_BATCHES) }
        })
        .collect())
}

/// Slope of an ordinary least-squares line through `(x_i, y_i)`.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Stationarity check of a running moment `m_0..m_N`.
#[derive(Debug, Clone, Serialize)]
pub struct PlateauCheck {
    /// sup over `n in [N/4, N/2]`
    pub sup_second_quarter: f64,
    /// sup over `n in [N/2, N]`
    pub sup_last_half: f64,
    /// least-squares slope per step over the last half
    pub slope_last_half: f64,
    pub passed: bool,
}

/// The sup over the last half lies within `rel_tol` of the sup over the
/// second quarter, and the fitted slope over the last half is within
/// `slope_tol` of 0.
pub fn plateau_check(values: &[f64], rel_tol: f64, slope_tol: f64) -> PlateauCheck {
    let n = values.len().saturating_sub(1);
    let sup = |r: std::ops::RangeInclusive<usize>| values[r].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q = sup(n / 4..=n / 2);
    let l = sup(n / 2..=n);
    let xs: Vec<f64> = (n / 2..=n).map(|k| k as f64).collect();
    let slope = linear_slope(&xs, &values[n / 2..=n]);
    let finite = values.iter().all(|v| v.is_finite());
    let passed = finite && (l - q).abs() <= rel_tol * q.abs() && slope.abs() <= slope_tol;
    PlateauCheck { sup_second_quarter: q, sup_last_half: l, slope_last_half: slope, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn normals(seed: u64, n: usize, sd: f64) -> Vec<f64> {
        let mut s = derive_stream(seed, 0);
        (0..n).map(|_| sd * s.standard_normal()).collect()
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::new();
        s.add(1.0);
        for _ in 0..1_000_000 {
            s.add(1e-16);
        }
        assert!((s.value() - (1.0 + 1e-10)).abs() < 1e-22);
    }

    #[test]
    fn ks_degenerate_zero() {
        let r = ks_to_normal(&[0.0; 10], 0.0).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(matches!(ks_to_normal(&[0.0, 1.0], 0.0), Err(Error::Contract(_))));
        assert!(matches!(ks_to_normal(&[], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ks_accepts_matching_normal() {
        let x = normals(1, 10_000, 1.5);
        let r = ks_to_normal(&x, 2.25).unwrap();
        assert!(r.statistic < 0.0163 * 1.5, "D = {}", r.statistic);
    }

    #[test]
    fn ks_detects_wrong_scale() {
        let x = normals(2, 10_000, 1.0);
        let r = ks_to_normal(&x, 4.0).unwrap();
        assert!(r.statistic > 0.15, "D = {}", r.statistic);
    }

    #[test]
    fn ks_scale_gap_oracle() {
        // sup_x |Phi(x) - Phi(x/2)| by dense 1-D maximization
        let gap = (0..200_000)
            .map(|i| i as f64 * 1e-4)
            .map(|x| normal_cdf(x) - normal_cdf(x / 2.0))
            .fold(0.0, f64::max);
        // attained where phi(x) = phi(x/2)/2, i.e. x = sqrt(8 ln 2 / 3)
        let x = (8.0 * 2f64.ln() / 3.0).sqrt();
        let exact = normal_cdf(x) - normal_cdf(x / 2.0);
        assert!((gap - exact).abs() < 1e-8, "gap {gap} vs {exact}");
        assert!(gap > 0.15);
    }

    #[test]
    fn single_sample_ks_is_exact() {
        // ECDF jumps 0 -> 1 at 0 where Phi = 1/2
        let r = ks_to_normal(&[0.0], 1.0).unwrap();
        assert!((r.statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fit_exact_power_laws() {
        let taus: Vec<f64> = (4..=10).map(|k| 2f64.powi(-k)).collect();
        let lin: Vec<(f64, f64)> = taus.iter().map(|&t| (t, t)).collect();
        let f = fit_order(&lin).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-10 && (f.r_squared - 1.0).abs() < 1e-12);
        let half: Vec<(f64, f64)> = taus.iter().map(|&t| (t, t.sqrt())).collect();
        let f = fit_order(&half).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-10 && (f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_noisy_half_order() {
        let mut s = derive_stream(3, 0);
        let pts: Vec<(f64, f64)> = (4..=10)
            .map(|k| 2f64.powi(-k))
            .map(|t| (t, 3.0 * t.sqrt() * (1.0 + 0.01 * s.standard_normal())))
            .collect();
        let f = fit_order(&pts).unwrap();
        assert!((0.45..=0.55).contains(&f.slope), "slope {}", f.slope);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_order(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(fit_order(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
    }

    #[test]
    fn summarize_constant_and_gaussian() {
        let c = summarize(&[-2.0; 100], &[2, 4]).unwrap();
        assert_eq!(c[0].mean, 4.0);
        assert_eq!(c[1].mean, 16.0);
        let x = normals(4, 1_000_000, 1.0);
        let s = summarize(&x, &[2, 4]).unwrap();
        assert!((s[0].mean - 1.0).abs() < 0.005, "m2 {}", s[0].mean);
        assert!((s[1].mean - 3.0).abs() < 0.03, "m4 {}", s[1].mean);
        assert!(s[0].stderr > 0.0 && s[0].stderr < 0.005);
    }

    #[test]
    fn plateau_flat_and_growing() {
        let flat = vec![1.0; 1001];
        assert!(plateau_check(&flat, 0.25, 1e-6).passed);
        let growing: Vec<f64> = (0..1001).map(|k| 1.0 + k as f64).collect();
        let c = plateau_check(&growing, 0.25, 1e-6);
        assert!(!c.passed);
        assert!((c.slope_last_half - 1.0).abs() < 1e-12);
        let blown = vec![f64::INFINITY; 11];
        assert!(!plateau_check(&blown, 0.25, 1e-6).passed);
    }
}
