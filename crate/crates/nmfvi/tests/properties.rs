//! Randomized property checks for the tilt analytics, the prox, and the
//! transport distances.

use nmfvi::meanfield;
use nmfvi::priors::{PriorSpec, Tilt};
use nmfvi::prox::Denoiser;
use nmfvi::simulate::{w2_sliced, w2_squared_1d};
use proptest::prelude::*;

fn spike_slab() -> PriorSpec {
    PriorSpec::gaussian_spike_slab(0.5, 0.2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilt_mean_round_trip(u in -3.0f64..3.0, d in 0.1f64..3.0) {
        let prior = PriorSpec::gaussian_spike_slab(0.4, 0.9).unwrap();
        let h = prior.invert_mean(u, d).unwrap();
        let back = prior.tilted_moments(Tilt::new(h, d)).unwrap().mean;
        prop_assert!((back - u).abs() < 1e-9, "round trip {u} -> {back}");
    }

    #[test]
    fn tilt_mean_round_trip_bounded(u in -0.99f64..0.99, d in -1.0f64..2.0) {
        let prior = PriorSpec::three_point(0.6).unwrap();
        let h = prior.invert_mean(u, d).unwrap();
        let back = prior.tilted_moments(Tilt::new(h, d)).unwrap().mean;
        prop_assert!((back - u).abs() < 1e-9);
    }

    #[test]
    fn cgf_even_and_mean_odd(g1 in 0.0f64..4.0, g2 in -0.5f64..3.0) {
        let prior = spike_slab();
        let plus = prior.tilted_moments(Tilt::new(g1, g2)).unwrap();
        let minus = prior.tilted_moments(Tilt::new(-g1, g2)).unwrap();
        prop_assert!((plus.cgf - minus.cgf).abs() < 1e-10);
        prop_assert!((plus.mean + minus.mean).abs() < 1e-10);
        prop_assert!(plus.variance > 0.0);
    }

    #[test]
    fn quantile_cdf_consistency(t in 0.001f64..0.999, g1 in -2.0f64..2.0) {
        let prior = spike_slab();
        let tilt = Tilt::new(g1, 1.0);
        let x = prior.tilted_quantile(tilt, t).unwrap();
        let cdf = prior.tilted_cdf(tilt, x).unwrap();
        prop_assert!(cdf >= t - 1e-8, "cdf {cdf} below level {t}");
        let left = prior.tilted_cdf(tilt, x - 1e-9 * (1.0 + x.abs())).unwrap();
        prop_assert!(left <= t + 1e-6, "left cdf {left} above level {t}");
    }

    #[test]
    fn prox_monotone_and_nonexpansive(x1 in -4.0f64..4.0, dx in 1e-6f64..2.0, t in 0.05f64..5.0) {
        let prior = spike_slab();
        let den = Denoiser::new(&prior, 1.0).unwrap();
        let x2 = x1 + dx;
        let e1 = den.eta(x1, t).unwrap();
        let e2 = den.eta(x2, t).unwrap();
        prop_assert!(e2 >= e1, "eta must be nondecreasing");
        prop_assert!(e2 - e1 <= dx + 1e-10, "eta must be 1-Lipschitz");
    }

    #[test]
    fn prox_odd_and_residual(x in 0.01f64..4.0, t in 0.05f64..5.0) {
        let prior = spike_slab();
        let den = Denoiser::new(&prior, 1.0).unwrap();
        let e = den.eta(x, t).unwrap();
        let resid = (e - x) / t + meanfield::penalty_f_prime(&prior, 1.0, e).unwrap();
        prop_assert!(resid.abs() < 1e-9, "stationarity residual {resid}");
        let e_neg = den.eta(-x, t).unwrap();
        prop_assert!((e + e_neg).abs() < 1e-9);
        let p = den.eta_prime(x, t).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn w2_1d_translation_and_identity(shift in -3.0f64..3.0, seed in 0u64..1000) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        prop_assert!(w2_squared_1d(&xs, &xs) == 0.0);
        let ys: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let w = w2_squared_1d(&xs, &ys);
        prop_assert!((w - shift * shift).abs() < 1e-10 * (1.0 + shift * shift));
    }

    #[test]
    fn w2_sliced_symmetric(seed in 0u64..500) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<(f64, f64)> = (0..64).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let b: Vec<(f64, f64)> = (0..80).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let ab = w2_sliced(&a, &b, 32, 9);
        let ba = w2_sliced(&b, &a, 32, 9);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
    }
}

#[test]
fn shrinkage_monotone_in_t_grid() {
    let prior = spike_slab();
    let den = Denoiser::new(&prior, 1.0).unwrap();
    for &x in &[0.3, 1.1, 2.4, 3.7] {
        let mut last = -1.0;
        for k in 1..40 {
            let t = 0.05 * k as f64;
            let gap = (x - den.eta(x, t).unwrap()).abs();
            assert!(
                gap >= last - 1e-11,
                "shrinkage not monotone at x={x}, t={t}"
            );
            last = gap;
        }
    }
}

#[test]
fn spike_slab_easy_condition_implies_full() {
    // Whenever the arithmetic spike-and-slab condition holds, the sup of the
    // tilted variance stays below the noise level.
    for q in [0.05, 0.2, 0.4, 0.6, 0.8] {
        for delta2 in [0.05, 0.2, 0.5, 1.0] {
            for sigma2 in [0.5, 1.0, 2.0] {
                let lhs = meanfield::spike_slab_condition_lhs(q, delta2, sigma2);
                if lhs < 1.0 {
                    let prior = PriorSpec::gaussian_spike_slab(q, delta2).unwrap();
                    assert!(
                        meanfield::spike_slab_condition_full(&prior, sigma2),
                        "easy held (lhs={lhs}) but full failed at q={q}, d2={delta2}, s2={sigma2}"
                    );
                }
            }
        }
    }
}
