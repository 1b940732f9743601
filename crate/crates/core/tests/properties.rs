use ergodic_bem::ergodic::{n_steps_for, sample_deviations, ErgodicLimitEstimate};
use ergodic_bem::integrator::{bem_step, BemConfig};
use ergodic_bem::model::{builtin_test_function, SdeModel, TestFunction};
use ergodic_bem::poisson::{clt_decomposition, solve_phi, GridSpec, PhiSettings, PoissonTable};
use proptest::prelude::*;
use std::sync::OnceLock;

fn ou_table() -> &'static PoissonTable {
    static TABLE: OnceLock<PoissonTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let m = SdeModel::ornstein_uhlenbeck(8.0, 1.0).unwrap();
        let h = builtin_test_function("x").unwrap();
        let settings =
            PhiSettings { t_trunc: 1.5, quad_tau: 2f64.powi(-11), n_inner_paths: 4, master_seed: 9, variational_gradient: false };
        solve_phi(&m, &h, 0.0, &GridSpec::new(-2.0, 2.0, 41).unwrap(), &settings).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_derivative_matches_central_difference(x in -3.0f64..3.0, which in 0usize..2) {
        let m = if which == 0 { SdeModel::example51() } else { SdeModel::example52() };
        let e = 1e-5;
        let fd = (m.drift1(x + e) - m.drift1(x - e)) / (2.0 * e);
        let exact = m.drift1_prime(x);
        prop_assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{fd} vs {exact}");
        let fd_s = (m.diffusion1(x + e) - m.diffusion1(x - e)) / (2.0 * e);
        prop_assert!((fd_s - m.diffusion1_prime(x)).abs() <= 1e-6 * (1.0 + fd_s.abs()));
    }

    #[test]
    fn implicit_step_solves_its_equation(x in -5.0f64..5.0, z in -4.0f64..4.0, k in 4i32..12) {
        let m = SdeModel::example51();
        let tau = 2f64.powi(-k);
        let dw = z * tau.sqrt();
        let out = bem_step(&m, &BemConfig::new(tau), &[x], &[dw]).unwrap();
        let y = out.state[0];
        let rhs = x + m.diffusion1(x) * dw;
        prop_assert!((y - tau * m.drift1(y) - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn step_count_is_monotone_in_tau(t1 in 0.001f64..0.2, t2 in 0.001f64..0.2, alpha in 1.01f64..=2.0) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let n_lo = n_steps_for(lo, alpha).unwrap();
        let n_hi = n_steps_for(hi, alpha).unwrap();
        prop_assert!(n_lo >= n_hi);
        prop_assert!((n_lo as f64 * lo.powf(alpha) - 1.0).abs() <= 0.5 * lo.powf(alpha) + 1e-12);
    }

    #[test]
    fn affine_observable_scales_deviations(a in -3.0f64..3.0, c in -2.0f64..2.0, seed in 0u64..1000) {
        let m = SdeModel::example51();
        let h = builtin_test_function("sin_plus_one").unwrap();
        let h2 = TestFunction::affine(&h, a, c);
        let cfg = BemConfig::new(0.1);
        let pi = 1.0;
        let z = sample_deviations(&m, &cfg, &h, &[1.0], 2.0, 8, &ErgodicLimitEstimate::exact(pi), seed).unwrap();
        let z2 = sample_deviations(&m, &cfg, &h2, &[1.0], 2.0, 8, &ErgodicLimitEstimate::exact(a * pi + c), seed).unwrap();
        for (u, v) in z.samples.iter().zip(&z2.samples) {
            prop_assert!((v - a * u).abs() <= 1e-10 * (1.0 + (a * u).abs()), "{v} vs {}", a * u);
        }
    }

    #[test]
    fn deviations_are_seed_deterministic(seed in 0u64..10_000) {
        let m = SdeModel::example52();
        let h = builtin_test_function("x5").unwrap();
        let cfg = BemConfig::new(0.1);
        let run = |s| sample_deviations(&m, &cfg, &h, &[0.5], 2.0, 4, &ErgodicLimitEstimate::exact(0.0), s).unwrap().samples;
        let a = run(seed);
        prop_assert_eq!(&a, &run(seed));
        prop_assert_ne!(a, run(seed + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn poisson_solution_is_linear_in_the_observable(a in 0.2f64..3.0, c in -2.0f64..2.0) {
        let m = SdeModel::ornstein_uhlenbeck(4.0, 0.7).unwrap();
        let h = builtin_test_function("sin_plus_one").unwrap();
        let h2 = TestFunction::affine(&h, a, c);
        let grid = GridSpec::new(-1.0, 1.0, 5).unwrap();
        let settings =
            PhiSettings { t_trunc: 1.0, quad_tau: 0.005, n_inner_paths: 4, master_seed: 3, variational_gradient: false };
        let pi = 1.0;
        let t1 = solve_phi(&m, &h, pi, &grid, &settings).unwrap();
        let t2 = solve_phi(&m, &h2, a * pi + c, &grid, &settings).unwrap();
        for (p, q) in t1.phi.iter().zip(&t2.phi) {
            prop_assert!((q - a * p).abs() <= 1e-10 * (1.0 + (a * p).abs()), "{q} vs {}", a * p);
        }
    }

    #[test]
    fn martingale_plus_remainder_is_the_statistic(seed in 0u64..1000, tau_k in 0usize..3) {
        let m = SdeModel::ornstein_uhlenbeck(8.0, 1.0).unwrap();
        let h = builtin_test_function("x").unwrap();
        let tau = [0.1, 0.08, 0.05][tau_k];
        let d = clt_decomposition(&m, ou_table(), &BemConfig::new(tau), &h, 0.0, 0.3, 16, seed).unwrap();
        for ((z, hh), r) in d.z_samples.iter().zip(&d.h_samples).zip(&d.r_samples) {
            prop_assert!((hh + r - z).abs() <= 1e-10 * (1.0 + z.abs()));
        }
    }
}
