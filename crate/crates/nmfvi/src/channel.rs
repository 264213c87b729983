//! Expectation engine over the scalar channel `(B, Z) ~ π* ⊗ N(0,1)` and the
//! sampler for the predicted limit law.
//!
//! Expectations are tensor products: Gauss-Hermite in `Z`, and in `B` exact
//! atom enumeration plus Gauss-Hermite over Gaussian slab components, or
//! seeded Monte Carlo (required for grid-density truths). Node evaluation
//! may run in parallel; the weighted reduction always happens in fixed node
//! order, so results do not depend on the thread count.

use crate::meanfield::ProblemSpec;
use crate::numerics::gauss_hermite_normal;
use crate::par;
use crate::priors::PriorSpec;
use crate::prox::{Denoiser, ProxError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("integrand returned a non-finite value at (B={b}, Z={z})")]
    NonFinite { b: f64, z: f64 },
    #[error("invalid quadrature scheme: {0}")]
    InvalidScheme(String),
    #[error(transparent)]
    Prox(#[from] ProxError),
}

/// How the continuous part of the `B`-integral is evaluated.
#[derive(Debug, Clone, Serialize)]
pub enum SlabStrategy {
    GaussHermite { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadratureScheme {
    pub hermite_nodes_z: usize,
    pub slab: SlabStrategy,
}

impl Default for QuadratureScheme {
    fn default() -> Self {
        QuadratureScheme {
            hermite_nodes_z: 61,
            slab: SlabStrategy::GaussHermite { nodes: 61 },
        }
    }
}

impl QuadratureScheme {
    pub fn with_nodes(nodes: usize) -> Self {
        QuadratureScheme {
            hermite_nodes_z: nodes,
            slab: SlabStrategy::GaussHermite { nodes },
        }
    }

    pub fn monte_carlo(nodes_z: usize, samples: usize, seed: u64) -> Self {
        QuadratureScheme {
            hermite_nodes_z: nodes_z,
            slab: SlabStrategy::MonteCarlo { samples, seed },
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let check_nodes = |n: usize, what: &str| {
            if n < 21 || n.is_multiple_of(2) {
                Err(ChannelError::InvalidScheme(format!(
                    "{what} node count {n} must be odd and at least 21"
                )))
            } else {
                Ok(())
            }
        };
        check_nodes(self.hermite_nodes_z, "Z")?;
        match self.slab {
            SlabStrategy::GaussHermite { nodes } => check_nodes(nodes, "slab")?,
            SlabStrategy::MonteCarlo { samples, .. } => {
                if samples < 10_000 {
                    return Err(ChannelError::InvalidScheme(format!(
                        "Monte Carlo sample count {samples} must be at least 10000"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Weighted nodes `(w_j, b_j)` representing the truth distribution.
pub fn b_nodes(
    problem: &ProblemSpec,
    scheme: &QuadratureScheme,
) -> Result<Vec<(f64, f64)>, ChannelError> {
    scheme.validate()?;
    match (&problem.truth, &scheme.slab) {
        (PriorSpec::ThreePointDiscrete { q }, _) => Ok(vec![
            (*q, 0.0),
            (0.5 * (1.0 - q), -1.0),
            (0.5 * (1.0 - q), 1.0),
        ]),
        (PriorSpec::GaussianMeanZero { delta2 }, SlabStrategy::GaussHermite { nodes }) => {
            let sd = delta2.sqrt();
            Ok(gauss_hermite_normal(*nodes)
                .into_iter()
                .map(|(z, w)| (w, sd * z))
                .collect())
        }
        (PriorSpec::GaussianSpikeSlab { q, delta2 }, SlabStrategy::GaussHermite { nodes }) => {
            let sd = delta2.sqrt();
            let mut out = Vec::with_capacity(nodes + 1);
            if *q > 0.0 {
                out.push((*q, 0.0));
            }
            out.extend(
                gauss_hermite_normal(*nodes)
                    .into_iter()
                    .map(|(z, w)| ((1.0 - q) * w, sd * z)),
            );
            Ok(out)
        }
        (PriorSpec::GridDensity(_), SlabStrategy::GaussHermite { .. }) => {
            Err(ChannelError::InvalidScheme(
                "grid-density truths need the Monte Carlo slab strategy".into(),
            ))
        }
        (truth, SlabStrategy::MonteCarlo { samples, seed }) => {
            let w = 1.0 / *samples as f64;
            Ok(truth
                .sample(*seed, *samples)
                .into_iter()
                .map(|b| (w, b))
                .collect())
        }
    }
}

/// Gauss-Hermite nodes `(w_i, z_i)` for the standard normal `Z`.
pub fn z_nodes(scheme: &QuadratureScheme) -> Vec<(f64, f64)> {
    gauss_hermite_normal(scheme.hermite_nodes_z)
        .into_iter()
        .map(|(z, w)| (w, z))
        .collect()
}

/// `E[f(B, Z)]` by tensor-product quadrature. Deterministic given the
/// scheme; errors if any evaluation is non-finite.
pub fn expect_bz<F>(
    problem: &ProblemSpec,
    scheme: &QuadratureScheme,
    f: F,
) -> Result<f64, ChannelError>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let out = expect_bz_vec::<1, _>(problem, scheme, |b, z| [f(b, z)])?;
    Ok(out[0])
}

/// Vector-valued variant: integrates `K` components sharing one evaluation
/// pass (the fixed-point step uses this to reuse prox solves).
pub fn expect_bz_vec<const K: usize, F>(
    problem: &ProblemSpec,
    scheme: &QuadratureScheme,
    f: F,
) -> Result<[f64; K], ChannelError>
where
    F: Fn(f64, f64) -> [f64; K] + Sync,
{
    let bs = b_nodes(problem, scheme)?;
    let zs = z_nodes(scheme);
    // One task per B node: the inner Z loop is sequential, tasks are
    // independent, results are reduced in B order afterwards.
    let rows = par::map_collect(&bs, |&(wb, b)| {
        let mut acc = [0.0; K];
        for &(wz, z) in &zs {
            let vals = f(b, z);
            for k in 0..K {
                if !vals[k].is_finite() {
                    return Err((b, z));
                }
                acc[k] += wz * vals[k];
            }
        }
        let mut row = [0.0; K];
        for k in 0..K {
            row[k] = wb * acc[k];
        }
        Ok(row)
    });
    let mut total = [0.0; K];
    for row in rows {
        match row {
            Ok(vals) => {
                for k in 0..K {
                    total[k] += vals[k];
                }
            }
            Err((b, z)) => return Err(ChannelError::NonFinite { b, z }),
        }
    }
    Ok(total)
}

/// Expectation over `B` alone (the coverage functionals integrate an exact
/// conditional-Gaussian probability over the truth distribution).
pub fn expect_b<F>(
    problem: &ProblemSpec,
    scheme: &QuadratureScheme,
    f: F,
) -> Result<f64, ChannelError>
where
    F: Fn(f64) -> f64 + Sync,
{
    let bs = b_nodes(problem, scheme)?;
    let vals = par::map_collect(&bs, |&(w, b)| (w, f(b)));
    let mut total = 0.0;
    for (w, v) in vals {
        if !v.is_finite() {
            return Err(ChannelError::NonFinite {
                b: f64::NAN,
                z: f64::NAN,
            });
        }
        total += w * v;
    }
    Ok(total)
}

/// The predicted limit law: `(η(τ*Z + B, κ*), B)` with `κ* = τ*σ²/b*`.
#[derive(Debug, Clone)]
pub struct ChannelLaw<'a> {
    pub problem: &'a ProblemSpec,
    pub tau_star: f64,
    pub kappa_star: f64,
}

impl<'a> ChannelLaw<'a> {
    pub fn new(
        problem: &'a ProblemSpec,
        tau_star: f64,
        kappa_star: f64,
    ) -> Result<Self, ChannelError> {
        if !(tau_star >= problem.sigma()) {
            return Err(ChannelError::InvalidScheme(format!(
                "tau_star = {tau_star} must be at least sigma = {}",
                problem.sigma()
            )));
        }
        if !(kappa_star > 0.0) {
            return Err(ChannelError::InvalidScheme(format!(
                "kappa_star = {kappa_star} must be positive"
            )));
        }
        Ok(ChannelLaw {
            problem,
            tau_star,
            kappa_star,
        })
    }

    /// `m` iid draws of `(η(τ*Z+B, κ*), B)`, deterministic per seed.
    pub fn sample(
        &self,
        denoiser: &Denoiser<'_>,
        seed: u64,
        m: usize,
    ) -> Result<Vec<(f64, f64)>, ChannelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = self.problem.truth.sample_with_rng(&mut rng, m);
        let zs: Vec<f64> = (0..m)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let pairs: Vec<(f64, f64)> = bs.into_iter().zip(zs).collect();
        let out = par::map_collect(&pairs, |&(b, z)| {
            denoiser
                .eta(self.tau_star * z + b, self.kappa_star)
                .map(|eta| (eta, b))
        });
        out.into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ridge_problem() -> ProblemSpec {
        let prior = PriorSpec::gaussian_mean_zero(1.0).unwrap();
        ProblemSpec::well_specified(prior, 1.0, 2.0).unwrap()
    }

    fn spike_problem() -> ProblemSpec {
        let prior = PriorSpec::gaussian_spike_slab(0.5, 1.0).unwrap();
        ProblemSpec::well_specified(prior, 1.0, 1.0).unwrap()
    }

    #[test]
    fn normalization_and_independence() {
        let scheme = QuadratureScheme::default();
        for problem in [ridge_problem(), spike_problem()] {
            let one = expect_bz(&problem, &scheme, |_, _| 1.0).unwrap();
            assert_abs_diff_eq!(one, 1.0, epsilon = 1e-12);
            let cross = expect_bz(&problem, &scheme, |b, z| b * z).unwrap();
            assert_abs_diff_eq!(cross, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn second_moment_of_truth() {
        let scheme = QuadratureScheme::default();
        let m2 = expect_bz(&spike_problem(), &scheme, |b, _| b * b).unwrap();
        assert_abs_diff_eq!(m2, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn invalid_schemes_rejected() {
        assert!(QuadratureScheme::with_nodes(20).validate().is_err());
        assert!(QuadratureScheme::with_nodes(19).validate().is_err());
        assert!(
            QuadratureScheme::monte_carlo(61, 100, 0)
                .validate()
                .is_err()
        );
        let prior = PriorSpec::grid_density(1.0, vec![0.0; 200]).unwrap();
        let problem = ProblemSpec::well_specified(prior, 2.0, 1.0).unwrap();
        assert!(matches!(
            b_nodes(&problem, &QuadratureScheme::default()),
            Err(ChannelError::InvalidScheme(_))
        ));
        assert!(b_nodes(&problem, &QuadratureScheme::monte_carlo(61, 20_000, 1)).is_ok());
    }

    #[test]
    fn quadrature_matches_monte_carlo() {
        let problem = spike_problem();
        let f = |b: f64, z: f64| (b + z).tanh();
        let quad = expect_bz(&problem, &QuadratureScheme::default(), f).unwrap();
        let m = 1_000_000;
        let mc_scheme = QuadratureScheme::monte_carlo(61, m, 99);
        let mc = expect_bz(&problem, &mc_scheme, f).unwrap();
        // Crude stderr bound for a bounded integrand.
        let stderr = 1.0 / (m as f64).sqrt();
        assert!(
            (quad - mc).abs() < 3.0 * stderr,
            "quad {quad} vs mc {mc} beyond 3 stderr {stderr}"
        );
    }

    #[test]
    fn node_refinement_is_stable() {
        let problem = spike_problem();
        let f = |b: f64, z: f64| (0.3 * (b + 0.5 * z)).cos() * (-0.1 * b * b).exp();
        let coarse = expect_bz(&problem, &QuadratureScheme::with_nodes(61), f).unwrap();
        let fine = expect_bz(&problem, &QuadratureScheme::with_nodes(121), f).unwrap();
        assert_abs_diff_eq!(coarse, fine, epsilon = 1e-10);
    }

    #[test]
    fn channel_sampling_deterministic() {
        let problem = ridge_problem();
        let den = Denoiser::new(&problem.prior, problem.sigma2).unwrap();
        let law = ChannelLaw::new(&problem, 1.2, 1.3).unwrap();
        let a = law.sample(&den, 5, 1).unwrap();
        let b = law.sample(&den, 5, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expect_bz_parallel_bit_identical() {
        let problem = spike_problem();
        let scheme = QuadratureScheme::default();
        let f = |b: f64, z: f64| (b - 0.3 * z).powi(2) * (0.2 * z).cos();
        let wide = par::run_with_threads(8, || expect_bz(&problem, &scheme, f).unwrap());
        let narrow = par::run_with_threads(1, || expect_bz(&problem, &scheme, f).unwrap());
        assert_eq!(wide.to_bits(), narrow.to_bits());
    }

    #[test]
    fn non_finite_integrand_detected() {
        let problem = ridge_problem();
        let scheme = QuadratureScheme::default();
        let res = expect_bz(&problem, &scheme, |b, _| 1.0 / (b - b));
        assert!(matches!(res, Err(ChannelError::NonFinite { .. })));
    }
}
