//! Mean-field penalty machinery: the per-coordinate KL penalty `G(u, d)`,
//! the effective penalty `F(u) = G(u, 1/σ²) − u²/(2σ²)` with derivatives,
//! and convexity certificates.
//!
//! `F` strong convexity is what licenses the prox, the scalar max-min
//! problem, and the whole downstream pipeline, so `check_convexity` combines
//! the analytic sufficient conditions (GHS-nice densities, sparse three-point
//! priors, low signal-to-noise, the spike-and-slab inequality) with an
//! unconditional numerical sweep of `F''` over the bulk of the prior.

use crate::numerics::golden_min;
use crate::priors::{PriorError, PriorSpec, Tilt};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// A regression problem in the proportional regime: fitted prior, true
/// signal distribution, noise variance, and aspect ratio `α = n/p`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub prior: PriorSpec,
    pub truth: PriorSpec,
    pub sigma2: f64,
    pub alpha: f64,
    s2: f64,
}

impl ProblemSpec {
    pub fn new(
        prior: PriorSpec,
        truth: PriorSpec,
        sigma2: f64,
        alpha: f64,
    ) -> Result<Self, MeanFieldError> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(MeanFieldError::InvalidProblem(format!(
                "sigma2 = {sigma2} must be positive"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(MeanFieldError::InvalidProblem(format!(
                "alpha = {alpha} must be positive"
            )));
        }
        let s2 = truth.second_moment();
        Ok(ProblemSpec {
            prior,
            truth,
            sigma2,
            alpha,
            s2,
        })
    }

    /// Matched-prior convenience constructor (`π = π*`).
    pub fn well_specified(
        prior: PriorSpec,
        sigma2: f64,
        alpha: f64,
    ) -> Result<Self, MeanFieldError> {
        let truth = prior.clone();
        ProblemSpec::new(prior, truth, sigma2, alpha)
    }

    /// Second moment `s₂` of the truth distribution.
    pub fn truth_second_moment(&self) -> f64 {
        self.s2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// `G(u, d)`: KL divergence from the mean-`u` tilt to the `(0, d)`-tilt,
/// `u·h(u,d) − c(h(u,d), d) + c(0, d)`.
///
/// At a finite support endpoint the KL to the degenerate law applies:
/// `-log π({endpoint})` for the discrete kind, `+∞` for continuous ones.
pub fn penalty_g(prior: &PriorSpec, u: f64, d: f64) -> Result<f64, MeanFieldError> {
    let (lo, hi) = prior.support();
    if u == lo || u == hi {
        return Ok(match prior {
            PriorSpec::ThreePointDiscrete { q } => -((0.5 * (1.0 - q)).ln()),
            _ => f64::INFINITY,
        });
    }
    if !(u > lo && u < hi) {
        return Err(PriorError::OutOfSupport { u, lo, hi }.into());
    }
    let h = prior.invert_mean(u, d)?;
    let c_h = prior.cgf(Tilt::new(h, d))?;
    let c_0 = prior.cgf(Tilt::new(0.0, d))?;
    Ok(u * h - c_h + c_0)
}

/// `F(u) = G(u, 1/σ²) − u²/(2σ²)` together with `F'` and `F''`.
///
/// `F'(u) = h(u, 1/σ²) − u/σ²` and `F''(u) = 1/c̈(h(u, 1/σ²), 1/σ²) − 1/σ²`,
/// with `c̈` the tilted variance.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyF {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

pub fn penalty_f_full(prior: &PriorSpec, sigma2: f64, u: f64) -> Result<PenaltyF, MeanFieldError> {
    let d = 1.0 / sigma2;
    let h = prior.invert_mean(u, d)?;
    let at_h = prior.tilted_moments(Tilt::new(h, d))?;
    let c_0 = prior.cgf(Tilt::new(0.0, d))?;
    Ok(PenaltyF {
        value: u * h - at_h.cgf + c_0 - u * u * d / 2.0,
        first: h - u * d,
        second: 1.0 / at_h.variance - d,
    })
}

pub fn penalty_f(prior: &PriorSpec, sigma2: f64, u: f64) -> Result<f64, MeanFieldError> {
    Ok(penalty_f_full(prior, sigma2, u)?.value)
}

pub fn penalty_f_prime(prior: &PriorSpec, sigma2: f64, u: f64) -> Result<f64, MeanFieldError> {
    let d = 1.0 / sigma2;
    Ok(prior.invert_mean(u, d)? - u * d)
}

pub fn penalty_f_second(prior: &PriorSpec, sigma2: f64, u: f64) -> Result<f64, MeanFieldError> {
    Ok(penalty_f_full(prior, sigma2, u)?.second)
}

/// Which sufficient condition certified strong convexity of `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Certificate {
    NicePrior,
    #[serde(rename = "DiscreteGHS")]
    DiscreteGhs,
    #[serde(rename = "LowSNR")]
    LowSnr,
    SpikeSlabCondition,
    NumericalSweep,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    pub certified: bool,
    pub certificate: Certificate,
    pub min_f_second: f64,
    pub sweep_grid: String,
}

/// The easy spike-and-slab sufficient condition: left side of
/// `(1 + 2q/(1−q) √(1+Δ²/σ²)) Δ²/(σ²+Δ²) < 1`.
pub fn spike_slab_condition_lhs(q: f64, delta2: f64, sigma2: f64) -> f64 {
    (1.0 + 2.0 * q / (1.0 - q) * (1.0 + delta2 / sigma2).sqrt()) * delta2 / (sigma2 + delta2)
}

/// The full spike-and-slab condition: the largest variance over all
/// `(h, 1/σ²)`-tilts must stay below `σ²`. The variance is scanned on a wide
/// `h`-grid and refined by golden section around the best cell.
pub fn spike_slab_condition_full(prior: &PriorSpec, sigma2: f64) -> bool {
    sup_tilted_variance(prior, 1.0 / sigma2) < sigma2
}

fn sup_tilted_variance(prior: &PriorSpec, d: f64) -> f64 {
    let var_at = |h: f64| {
        prior
            .tilted_moments(Tilt::new(h, d))
            .map(|m| m.variance)
            .unwrap_or(f64::INFINITY)
    };
    // Symmetric in h, so scan h >= 0 only.
    let grid = 257;
    let hi = 50.0;
    let mut best_h = 0.0;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..grid {
        let h = hi * i as f64 / (grid - 1) as f64;
        let v = var_at(h);
        if v > best_v {
            best_v = v;
            best_h = h;
        }
    }
    let step = hi / (grid - 1) as f64;
    let (_, neg_max) = golden_min(
        &|h: f64| -var_at(h),
        (best_h - step).max(0.0),
        (best_h + step).min(hi),
        1e-10,
    );
    -neg_max
}

/// Numerical `F''` sweep: 2048 points covering all but `1e-6` of the prior
/// mass, plus a dense refinement near zero. Returns the minimum together
/// with a grid description.
fn sweep_f_second(prior: &PriorSpec, sigma2: f64) -> (f64, String) {
    let (slo, shi) = prior.support();
    let mut lo = prior
        .tilted_quantile(Tilt::ZERO, 5e-7)
        .unwrap_or(if slo.is_finite() { slo } else { -10.0 });
    let mut hi = prior
        .tilted_quantile(Tilt::ZERO, 1.0 - 5e-7)
        .unwrap_or(if shi.is_finite() { shi } else { 10.0 });
    // Keep strictly inside bounded supports.
    if slo.is_finite() {
        let margin = 1e-6 * (shi - slo);
        lo = lo.max(slo + margin);
        hi = hi.min(shi - margin);
    }
    if !(hi > lo) {
        return (f64::NAN, "degenerate sweep range".to_string());
    }
    let mut grid: Vec<f64> = (0..2048)
        .map(|i| lo + (hi - lo) * i as f64 / 2047.0)
        .collect();
    let narrow = (hi - lo) / 64.0;
    grid.extend((0..257).map(|i| -narrow + 2.0 * narrow * i as f64 / 256.0));
    grid.retain(|u| *u > slo && *u < shi);
    let mut min_fs = f64::INFINITY;
    for &u in &grid {
        match penalty_f_second(prior, sigma2, u) {
            Ok(fs) => min_fs = min_fs.min(fs),
            Err(_) => return (f64::NAN, "penalty evaluation failed during sweep".into()),
        }
    }
    (
        min_fs,
        format!(
            "{} points on [{lo:.6}, {hi:.6}] plus 257 near 0",
            grid.len()
        ),
    )
}

/// Certifies strong convexity of `F` for the given prior and noise level.
///
/// Tries the analytic sufficient conditions for the prior kind first, then
/// always runs the numerical sweep so `min_f_second` is populated; the final
/// verdict requires the sweep minimum to be positive.
pub fn check_convexity(prior: &PriorSpec, sigma2: f64) -> ConvexityReport {
    let analytic = match prior {
        PriorSpec::GaussianMeanZero { .. } => Some(Certificate::NicePrior),
        PriorSpec::GridDensity(g) => {
            if grid_is_ghs_nice(g.potential()) {
                Some(Certificate::NicePrior)
            } else if sigma2 > g.half_width() * g.half_width() {
                Some(Certificate::LowSnr)
            } else {
                None
            }
        }
        PriorSpec::ThreePointDiscrete { q } => {
            if *q > 2.0 / 3.0 {
                Some(Certificate::DiscreteGhs)
            } else if sigma2 > 1.0 {
                Some(Certificate::LowSnr)
            } else {
                None
            }
        }
        PriorSpec::GaussianSpikeSlab { q, delta2 } => {
            if spike_slab_condition_lhs(*q, *delta2, sigma2) < 1.0
                || spike_slab_condition_full(prior, sigma2)
            {
                Some(Certificate::SpikeSlabCondition)
            } else {
                None
            }
        }
    };
    let (min_f_second, sweep_grid) = sweep_f_second(prior, sigma2);
    let sweep_positive = min_f_second.is_finite() && min_f_second > 0.0;
    let certificate = match analytic {
        Some(cert) if sweep_positive => cert,
        _ if sweep_positive => Certificate::NumericalSweep,
        _ => Certificate::Failed,
    };
    ConvexityReport {
        certified: sweep_positive,
        certificate,
        min_f_second,
        sweep_grid,
    }
}

/// GHS niceness of a sampled potential: even (validated at construction),
/// non-decreasing in |x|, and `V'` convex on the non-negative half line
/// (checked through third differences).
fn grid_is_ghs_nice(v: &[f64]) -> bool {
    let n = v.len();
    let mid = n / 2;
    let scale = 1.0 + v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-9 * scale;
    let right = &v[mid..];
    for w in right.windows(2) {
        if w[1] < w[0] - tol {
            return false;
        }
    }
    let d1: Vec<f64> = right.windows(2).map(|w| w[1] - w[0]).collect();
    let d2: Vec<f64> = d1.windows(2).map(|w| w[1] - w[0]).collect();
    for w in d2.windows(2) {
        if w[1] < w[0] - tol {
            return false;
        }
    }
    true
}
