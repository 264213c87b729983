//! Asymptotic predictions from a solved fixed point: limiting MSE, the
//! per-coordinate negative log evidence, credible-interval coverage, and
//! corrected intervals built from the conditional law of the signal given
//! the denoised observation.
//!
//! Coverage functionals integrate an indicator of the form
//! `B ∈ [q_lo(η(τ*Z+B)), q_hi(η(τ*Z+B))]`. Both quantile processes are
//! monotone in `Z`, so conditionally on `B` the covered set is a `Z`-interval
//! whose endpoints are found by boolean bisection; the inner integral then
//! collapses to an exact Gaussian interval probability, which keeps the
//! quadrature error well below the raw tensor-rule error on a discontinuous
//! indicator.

use crate::channel::{self, ChannelError, QuadratureScheme};
use crate::fixedpoint::FixedPointSolution;
use crate::meanfield::ProblemSpec;
use crate::numerics::{bisect_transition, normal_cdf};
use crate::priors::{PriorError, Tilt};
use crate::prox::{Denoiser, ProxError};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("fixed-point solution is not converged")]
    NotConverged,
    #[error("zeta = {0} must lie in (0, 1)")]
    BadZeta(f64),
    #[error("x = {x} is outside the denoiser range ({lo}, {hi})")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("MSE identity violated: alpha(tau^2 - sigma^2) = {closed} vs quadrature {quadrature}")]
    IdentityCheck { closed: f64, quadrature: f64 },
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// All predictions for one problem at one solved fixed point.
#[derive(Debug, Clone, Serialize)]
pub struct Predictions {
    pub mse: f64,
    pub neg_log_z_per_p: f64,
    /// Keyed by the zeta value's shortest decimal representation.
    pub coverage: BTreeMap<String, f64>,
    pub zeta_list: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Prediction context holding the certified denoiser for one problem.
pub struct Predictor<'a> {
    problem: &'a ProblemSpec,
    scheme: &'a QuadratureScheme,
    sol: &'a FixedPointSolution,
    denoiser: Denoiser<'a>,
}

/// Search bound for the standard normal variable; the mass outside is zero
/// at f64 resolution.
const Z_BOUND: f64 = 40.0;

impl<'a> Predictor<'a> {
    pub fn new(
        problem: &'a ProblemSpec,
        scheme: &'a QuadratureScheme,
        sol: &'a FixedPointSolution,
    ) -> Result<Self, PredictionError> {
        if !sol.converged {
            return Err(PredictionError::NotConverged);
        }
        let denoiser = Denoiser::new(&problem.prior, problem.sigma2)?;
        Ok(Predictor {
            problem,
            scheme,
            sol,
            denoiser,
        })
    }

    pub fn denoiser(&self) -> &Denoiser<'a> {
        &self.denoiser
    }

    /// Limiting MSE `α(τ*² − σ²)`, cross-checked against the quadrature
    /// evaluation of `E[(η(τ*Z+B, κ*) − B)²]` (the two sides of the same
    /// identity; they must agree to 1e-8 at a converged solution).
    pub fn mse(&self) -> Result<f64, PredictionError> {
        let p = self.problem;
        let closed = p.alpha * (self.sol.tau_star * self.sol.tau_star - p.sigma2);
        let (tau, kappa) = (self.sol.tau_star, self.sol.kappa_star);
        let den = &self.denoiser;
        let quadrature =
            channel::expect_bz(p, self.scheme, |b, z| match den.eta(tau * z + b, kappa) {
                Ok(eta) => (eta - b) * (eta - b),
                Err(_) => f64::NAN,
            })?;
        if (closed - quadrature).abs() > 1e-8 {
            return Err(PredictionError::IdentityCheck { closed, quadrature });
        }
        Ok(closed)
    }

    /// Limiting `−(1/p) log Z_p^NMF`:
    /// `α b*²/(2σ²) + E F(η(B + τ*Z, κ*)) − c(0, 1/σ²)`.
    pub fn neg_log_z(&self) -> Result<f64, PredictionError> {
        let p = self.problem;
        let (tau, kappa) = (self.sol.tau_star, self.sol.kappa_star);
        let den = &self.denoiser;
        let expected_f = channel::expect_bz(p, self.scheme, |b, z| {
            let value = (|| -> Result<f64, ProxError> {
                let eta = den.eta(b + tau * z, kappa)?;
                crate::meanfield::penalty_f(den.prior(), p.sigma2, eta).map_err(|_| {
                    ProxError::OutOfRange {
                        x: eta,
                        lo: 0.0,
                        hi: 0.0,
                    }
                })
            })();
            value.unwrap_or(f64::NAN)
        })?;
        let c0 = p.prior.cgf(Tilt::new(0.0, 1.0 / p.sigma2))?;
        Ok(p.alpha * self.sol.b_star * self.sol.b_star / (2.0 * p.sigma2) + expected_f - c0)
    }

    /// Limiting average coverage of the NMF credible intervals at level
    /// `1 − ζ`: the expectation of
    /// `1{B ∈ [q_{ζ/2}, q_{1−ζ/2}]}` under the channel, where the quantiles
    /// belong to the tilt `(h(u₀, 1/σ²), 1/σ²)` at `u₀ = η(τ*Z+B, κ*)`.
    pub fn coverage(&self, zeta: f64) -> Result<f64, PredictionError> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(PredictionError::BadZeta(zeta));
        }
        let p = self.problem;
        let d = 1.0 / p.sigma2;
        let (tau, kappa) = (self.sol.tau_star, self.sol.kappa_star);
        let den = self.denoiser.clone();
        let prior = p.prior.clone();
        self.coverage_of_interval(
            move |b, z, level| {
                let u0 = den.eta(tau * z + b, kappa)?;
                let h = prior.invert_mean(u0, d)?;
                Ok(prior.tilted_quantile(Tilt::new(h, d), level)?)
            },
            zeta,
        )
    }

    /// Limiting coverage of the corrected intervals
    /// `[q_{ζ/2}(û), q_{1−ζ/2}(û)]`; at least `1 − ζ` by construction.
    pub fn corrected_coverage(&self, zeta: f64) -> Result<f64, PredictionError> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(PredictionError::BadZeta(zeta));
        }
        let p = self.problem;
        let tau = self.sol.tau_star;
        let tau2 = tau * tau;
        let truth = p.truth.clone();
        self.coverage_of_interval(
            move |b, z, level| {
                // Conditioning on η(τZ+B) = x is conditioning on s = τZ+B.
                let s = tau * z + b;
                Ok(truth.tilted_quantile(Tilt::new(s / tau2, 1.0 / tau2), level)?)
            },
            zeta,
        )
    }

    /// Shared engine: for each `B` node, the covered set in `Z` is an
    /// interval because both quantile endpoints are monotone in `Z`; its
    /// boundaries are located by boolean bisection and the inner integral is
    /// an exact Gaussian probability.
    fn coverage_of_interval<Q>(&self, quantile: Q, zeta: f64) -> Result<f64, PredictionError>
    where
        Q: Fn(f64, f64, f64) -> Result<f64, PredictionError> + Sync,
    {
        let tau = self.sol.tau_star;
        let lo_level = zeta / 2.0;
        let hi_level = 1.0 - zeta / 2.0;
        let per_b = |b: f64| -> f64 {
            let upper_reaches = |z: f64| match quantile(b, z, hi_level) {
                Ok(q) => q >= b,
                Err(_) => false,
            };
            let lower_below = |z: f64| match quantile(b, z, lo_level) {
                Ok(q) => q <= b,
                Err(_) => false,
            };
            // Upper endpoint crosses B from below as Z grows.
            let z_enter = if upper_reaches(-Z_BOUND) {
                -Z_BOUND
            } else if !upper_reaches(Z_BOUND) {
                return 0.0;
            } else {
                bisect_transition(&upper_reaches, -Z_BOUND, Z_BOUND, 1e-9 * tau.max(1.0))
            };
            // Lower endpoint crosses B from below as well; coverage ends there.
            let z_exit = if lower_below(Z_BOUND) {
                Z_BOUND
            } else if !lower_below(-Z_BOUND) {
                return 0.0;
            } else {
                bisect_transition(&lower_below, -Z_BOUND, Z_BOUND, 1e-9 * tau.max(1.0))
            };
            (normal_cdf(z_exit) - normal_cdf(z_enter)).max(0.0)
        };
        Ok(channel::expect_b(self.problem, self.scheme, per_b)?)
    }

    /// `q_t(x)`: the `t`-quantile of the conditional law of `B` given
    /// `η(τ*Z+B, κ*) = x`. Inverting `η` gives `s = x + κ* F'(x)`, and the
    /// conditional law is the `(s/τ*², 1/τ*²)`-tilt of the truth.
    pub fn conditional_quantile(&self, t: f64, x: f64) -> Result<f64, PredictionError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(PredictionError::BadZeta(t));
        }
        let s = self
            .denoiser
            .eta_inverse(x, self.sol.kappa_star)
            .map_err(|e| match e {
                ProxError::OutOfRange { x, lo, hi } => PredictionError::OutOfRange { x, lo, hi },
                other => PredictionError::Prox(other),
            })?;
        let tau2 = self.sol.tau_star * self.sol.tau_star;
        Ok(self
            .problem
            .truth
            .tilted_quantile(Tilt::new(s / tau2, 1.0 / tau2), t)?)
    }

    /// Corrected credible interval of nominal level `1 − ζ` at `x`.
    pub fn corrected_interval(&self, zeta: f64, x: f64) -> Result<(f64, f64), PredictionError> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(PredictionError::BadZeta(zeta));
        }
        let lo = self.conditional_quantile(zeta / 2.0, x)?;
        let hi = self.conditional_quantile(1.0 - zeta / 2.0, x)?;
        Ok((lo, hi))
    }

    /// Bundles MSE, evidence, and coverage across the requested levels.
    pub fn all(&self, zetas: &[f64]) -> Result<Predictions, PredictionError> {
        let mut coverage = BTreeMap::new();
        for &zeta in zetas {
            coverage.insert(format!("{zeta}"), self.coverage(zeta)?);
        }
        let mut warnings = Vec::new();
        if self.problem.prior.has_atom() {
            warnings.push(
                "prior has a point mass: the coverage limit assumes a continuous quantile \
                 function, the atom makes it discontinuous (closed intervals are used)"
                    .to_string(),
            );
        }
        Ok(Predictions {
            mse: self.mse()?,
            neg_log_z_per_p: self.neg_log_z()?,
            coverage,
            zeta_list: zetas.to_vec(),
            warnings,
        })
    }
}

/// Header for the long-form sweep rows keyed by prior hyperparameters.
pub const SWEEP_CSV_HEADER: &str =
    "q,delta2,alpha,sigma2,b_star,tau_star,mse,neg_log_z,coverage_95";

/// One long-form CSV row; `None` fields print as `NA`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_csv_row(
    q: Option<f64>,
    delta2: Option<f64>,
    alpha: f64,
    sigma2: f64,
    sol: &FixedPointSolution,
    mse: f64,
    neg_log_z: f64,
    coverage_95: f64,
) -> String {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x}"));
    format!(
        "{},{},{alpha},{sigma2},{},{},{mse},{neg_log_z},{coverage_95}",
        opt(q),
        opt(delta2),
        sol.b_star,
        sol.tau_star
    )
}
