//! Reproducible Gaussian streams for Brownian increments.
//!
//! Every simulated path owns one stream derived from `(master_seed, path_index)`.
//! The derivation is counter based: the master seed keys a ChaCha8 generator
//! and the path index selects its 64-bit stream id, so stream `i` never depends
//! on how many other streams were consumed before it. Normals are produced by
//! the ziggurat sampler of `rand_distr`, fixed for this build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Identity of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

impl StreamSpec {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self { master_seed, path_index }
    }

    pub fn open(self) -> GaussianStream {
        derive_stream(self.master_seed, self.path_index)
    }
}

/// A per-path source of standard normal and uniform variates.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    spec: StreamSpec,
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn spec(&self) -> StreamSpec {
        self.spec
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Fill `out` with independent N(0, tau) variates.
    pub fn fill_increments(&mut self, tau: f64, out: &mut [f64]) {
        let scale = tau.max(0.0).sqrt();
        for v in out.iter_mut() {
            *v = scale * self.standard_normal();
        }
    }

    /// Fill `out` with standard normals (unscaled).
    pub fn fill_standard(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }
}

/// Open the stream for `(master_seed, path_index)`. Pure: identical arguments
/// always give bit-identical sequences.
pub fn derive_stream(master_seed: u64, path_index: u64) -> GaussianStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    GaussianStream { spec: StreamSpec::new(master_seed, path_index), rng }
}

/// Derive an independent master seed for a named sub-experiment.
///
/// Used when one run needs several unrelated families of streams (for
/// example the reference ergodic limit and the deviation samples).
pub fn sub_seed(master_seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master_seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One Brownian increment in R^noise_dim with covariance `tau * I`.
///
/// `tau == 0` yields the zero vector; the stream still advances by
/// `noise_dim` draws so that alignment with other step sizes is preserved.
pub fn sample_increment(stream: &mut GaussianStream, tau: f64, noise_dim: usize) -> Vec<f64> {
    assert!(tau >= 0.0, "increment variance must be non-negative, got {tau}");
    let mut out = vec![0.0; noise_dim];
    stream.fill_increments(tau, &mut out);
    out
}

/// Sum consecutive blocks of `ratio` fine increments.
///
/// `fine` is a flat buffer of `n * noise_dim` values (increment `k` occupies
/// `fine[k*noise_dim..(k+1)*noise_dim]`). Coarse increment `j` is the sum of
/// fine increments `j*ratio .. (j+1)*ratio`, which is exactly the Brownian
/// increment over the coarse step.
pub fn aggregate_increments(fine: &[f64], noise_dim: usize, ratio: usize) -> Result<Vec<f64>> {
    if noise_dim == 0 || ratio == 0 {
        return Err(Error::contract("noise_dim and ratio must be positive"));
    }
    if fine.len() % noise_dim != 0 {
        return Err(Error::contract(format!(
            "increment buffer length {} is not a multiple of noise_dim {}",
            fine.len(),
            noise_dim
        )));
    }
    let n_fine = fine.len() / noise_dim;
    if n_fine % ratio != 0 {
        return Err(Error::contract(format!(
            "{n_fine} fine increments cannot be aggregated by ratio {ratio}"
        )));
    }
    let n_coarse = n_fine / ratio;
    let mut coarse = vec![0.0; n_coarse * noise_dim];
    for (j, block) in fine.chunks_exact(ratio * noise_dim).enumerate() {
        let target = &mut coarse[j * noise_dim..(j + 1) * noise_dim];
        for inc in block.chunks_exact(noise_dim) {
            for (t, v) in target.iter_mut().zip(inc) {
                *t += v;
            }
        }
    }
    Ok(coarse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_same_sequence() {
        let mut a = derive_stream(42, 7);
        let mut b = derive_stream(42, 7);
        for _ in 0..1000 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn stream_does_not_depend_on_siblings() {
        let mut first = derive_stream(9, 3);
        let expected: Vec<f64> = (0..16).map(|_| first.standard_normal()).collect();
        // consume a sibling stream heavily before opening stream 3 again
        let mut sibling = derive_stream(9, 2);
        for _ in 0..10_000 {
            sibling.standard_normal();
        }
        let mut again = derive_stream(9, 3);
        let got: Vec<f64> = (0..16).map(|_| again.standard_normal()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn cross_correlation_between_paths_is_small() {
        let n = 100_000;
        let mut a = derive_stream(11, 0);
        let mut b = derive_stream(11, 1);
        let (mut sab, mut saa, mut sbb, mut sa, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.standard_normal();
            let y = b.standard_normal();
            sab += x * y;
            saa += x * x;
            sbb += y * y;
            sa += x;
            sb += y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let rho = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        assert!(rho.abs() < 0.02, "rho = {rho}");
    }

    #[test]
    fn increment_variance_matches_tau() {
        let mut s = derive_stream(5, 0);
        let n = 1_000_000;
        let tau = 0.01;
        let mut buf = vec![0.0; n];
        s.fill_increments(tau, &mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var / tau - 1.0).abs() < 0.01, "var = {var}");
    }

    #[test]
    fn unit_increment_mean_and_kurtosis() {
        let mut s = derive_stream(6, 0);
        let n = 1_000_000;
        let (mut m1, mut m4) = (0.0, 0.0);
        for _ in 0..n {
            let z = sample_increment(&mut s, 1.0, 1)[0];
            m1 += z;
            m4 += z.powi(4);
        }
        m1 /= n as f64;
        m4 /= n as f64;
        assert!(m1.abs() < 0.004, "mean {m1}");
        assert!((m4 - 3.0).abs() < 0.05, "fourth moment {m4}");
    }

    #[test]
    fn zero_tau_gives_zero_vector() {
        let mut s = derive_stream(1, 1);
        assert_eq!(sample_increment(&mut s, 0.0, 3), vec![0.0; 3]);
    }

    #[test]
    fn aggregate_identity_and_pairs() {
        let fine = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(aggregate_increments(&fine, 1, 1).unwrap(), fine);
        assert_eq!(aggregate_increments(&fine, 1, 2).unwrap(), vec![3.0, 7.0]);
        // two-dimensional noise: pairs of vectors
        let fine2 = vec![1.0, 10.0, 2.0, 20.0];
        assert_eq!(aggregate_increments(&fine2, 2, 2).unwrap(), vec![3.0, 30.0]);
    }

    #[test]
    fn aggregate_rejects_ragged_length() {
        let err = aggregate_increments(&[1.0, 2.0, 3.0], 1, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn aggregated_variance_is_additive() {
        let mut s = derive_stream(8, 0);
        let n = 100_000;
        let mut fine = vec![0.0; n * 10];
        s.fill_increments(0.001, &mut fine);
        let coarse = aggregate_increments(&fine, 1, 10).unwrap();
        let var = coarse.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn sub_seeds_differ_by_tag() {
        assert_ne!(sub_seed(1, 0), sub_seed(1, 1));
        assert_eq!(sub_seed(1, 5), sub_seed(1, 5));
    }
}
