//! Scalar denoising function `η(x, t) = argmin_w (w−x)²/(2t) + F(w)` and its
//! input derivative.
//!
//! Strong convexity of `F` (certified at construction) makes the stationarity
//! residual `(w−x)/t + F'(w)` strictly increasing in `w`, so the minimizer is
//! a unique bracketed root and `η'(x,t) = 1/(1 + t·F''(η))` by implicit
//! differentiation.
//!
//! The root is solved in the tilt parameter rather than in `w`: substituting
//! `w = ċ(γ, d)` (the tilted mean at `d = 1/σ²`) turns the residual into
//! `(ċ(γ) − x)/t + γ − d·ċ(γ)`, numerically the same value, still strictly
//! increasing in `γ`, and each Newton step costs a single moment evaluation
//! instead of a nested mean inversion.

use crate::meanfield::{self, ConvexityReport};
use crate::priors::{PriorError, PriorSpec, Tilt, TiltedMoments};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProxError {
    #[error("convexity of F is not certified for this prior/noise pair ({0})")]
    NotConvexCertified(String),
    #[error("prox solve did not converge: x={x}, t={t}, best residual {residual}")]
    NoConvergence { x: f64, t: f64, residual: f64 },
    #[error("prox step width t={0} must be positive")]
    NonPositiveT(f64),
    #[error("x={x} lies outside the denoiser range ({lo}, {hi})")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("{0}")]
    MeanField(String),
}

impl From<meanfield::MeanFieldError> for ProxError {
    fn from(err: meanfield::MeanFieldError) -> Self {
        match err {
            meanfield::MeanFieldError::Prior(p) => ProxError::Prior(p),
            other => ProxError::MeanField(other.to_string()),
        }
    }
}

/// One prox evaluation: the minimizer, its input derivative, and the
/// effective penalty value there (a free by-product of the tilt-space
/// solve, used by the potential `φ`).
#[derive(Debug, Clone, Copy)]
pub struct EtaEval {
    pub eta: f64,
    pub eta_prime: f64,
    pub f_at_eta: f64,
}

/// A prox evaluator for one `(prior, σ²)` pair. Construction certifies
/// strong convexity; evaluation is a pure function afterwards.
#[derive(Debug, Clone)]
pub struct Denoiser<'a> {
    prior: &'a PriorSpec,
    sigma2: f64,
    report: ConvexityReport,
    /// Cached `c(0, 1/σ²)`.
    c0: f64,
}

impl<'a> Denoiser<'a> {
    pub fn new(prior: &'a PriorSpec, sigma2: f64) -> Result<Self, ProxError> {
        let report = meanfield::check_convexity(prior, sigma2);
        Self::with_report(prior, sigma2, report)
    }

    /// Reuses an existing convexity report instead of re-running the sweep.
    pub fn with_report(
        prior: &'a PriorSpec,
        sigma2: f64,
        report: ConvexityReport,
    ) -> Result<Self, ProxError> {
        if !report.certified {
            return Err(ProxError::NotConvexCertified(format!(
                "certificate = {:?}, min F'' = {}",
                report.certificate, report.min_f_second
            )));
        }
        let c0 = prior.cgf(Tilt::new(0.0, 1.0 / sigma2))?;
        Ok(Denoiser {
            prior,
            sigma2,
            report,
            c0,
        })
    }

    pub fn prior(&self) -> &PriorSpec {
        self.prior
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn report(&self) -> &ConvexityReport {
        &self.report
    }

    /// `η(x, t)`: unique minimizer of `(w−x)²/(2t) + F(w)` over the support.
    pub fn eta(&self, x: f64, t: f64) -> Result<f64, ProxError> {
        Ok(self.eta_eval(x, t)?.eta)
    }

    /// `η'(x, t) = 1/(1 + t F''(η)) ∈ (0, 1)`.
    pub fn eta_prime(&self, x: f64, t: f64) -> Result<f64, ProxError> {
        Ok(self.eta_eval(x, t)?.eta_prime)
    }

    /// `(η, η')` from one solve.
    pub fn eta_with_prime(&self, x: f64, t: f64) -> Result<(f64, f64), ProxError> {
        let ev = self.eta_eval(x, t)?;
        Ok((ev.eta, ev.eta_prime))
    }

    /// Full evaluation: `η`, `η'`, and `F(η)`.
    pub fn eta_eval(&self, x: f64, t: f64) -> Result<EtaEval, ProxError> {
        if !(t > 0.0) {
            return Err(ProxError::NonPositiveT(t));
        }
        let d = 1.0 / self.sigma2;
        if x == 0.0 {
            // Symmetric priors fix η(0, t) = 0 and F(0) = 0.
            let m = self.moments(0.0)?;
            return Ok(EtaEval {
                eta: 0.0,
                eta_prime: 1.0 / (1.0 + t * (1.0 / m.variance - d)),
                f_at_eta: 0.0,
            });
        }
        if let PriorSpec::GaussianMeanZero { delta2 } = self.prior {
            let slope = 1.0 / (1.0 + t / delta2);
            let eta = x * slope;
            return Ok(EtaEval {
                eta,
                eta_prime: slope,
                f_at_eta: eta * eta / (2.0 * delta2),
            });
        }

        // Residual in tilt space; strictly increasing because certification
        // gives var < σ², hence 1 + var (1/t − d) > var/t > 0.
        let resid = |m: &TiltedMoments, gamma: f64| (m.mean - x) / t + gamma - d * m.mean;
        let slope = |m: &TiltedMoments| 1.0 + m.variance * (1.0 / t - d);

        // The root has the sign of x since resid(0) = -x/t.
        let (mut lo, mut hi) = if x > 0.0 { (0.0, 1.0) } else { (-1.0, 0.0) };
        for _ in 0..400 {
            let edge = if x > 0.0 { hi } else { lo };
            let m = self.moments(edge)?;
            let r = resid(&m, edge);
            if (x > 0.0 && r >= 0.0) || (x < 0.0 && r <= 0.0) {
                break;
            }
            if x > 0.0 {
                hi *= 2.0;
            } else {
                lo *= 2.0;
            }
        }

        let mut gamma = 0.5 * (lo + hi);
        let mut best: Option<(f64, f64, TiltedMoments)> = None;
        for _ in 0..200 {
            let m = self.moments(gamma)?;
            let r = resid(&m, gamma);
            if !r.is_finite() {
                return Err(ProxError::NoConvergence {
                    x,
                    t,
                    residual: best.map_or(f64::INFINITY, |b| b.0),
                });
            }
            if best.is_none() || r.abs() < best.as_ref().unwrap().0 {
                best = Some((r.abs(), gamma, m));
            }
            if r.abs() <= 1e-10 {
                return Ok(self.finish(&m, gamma, t, d));
            }
            if r > 0.0 {
                hi = gamma;
            } else {
                lo = gamma;
            }
            if hi - lo <= f64::EPSILON * (1.0 + gamma.abs()) {
                // Tilt pinned to one ulp; the residual floor is set by the
                // slope 1/t and cannot shrink further in f64.
                let (_, g, m) = best.unwrap();
                return Ok(self.finish(&m, g, t, d));
            }
            let newton = gamma - r / slope(&m);
            gamma = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(ProxError::NoConvergence {
            x,
            t,
            residual: best.map_or(f64::INFINITY, |b| b.0),
        })
    }

    fn moments(&self, gamma: f64) -> Result<TiltedMoments, ProxError> {
        Ok(self
            .prior
            .tilted_moments(Tilt::new(gamma, 1.0 / self.sigma2))?)
    }

    /// Assembles the evaluation at the solved tilt; the minimizer is the
    /// tilted mean, kept strictly interior when rounding lands it on a
    /// finite support endpoint.
    fn finish(&self, m: &TiltedMoments, gamma: f64, t: f64, d: f64) -> EtaEval {
        let (slo, shi) = self.prior.support();
        let mut eta = m.mean;
        if shi.is_finite() && eta >= shi {
            eta = shi.next_down();
        }
        if slo.is_finite() && eta <= slo {
            eta = slo.next_up();
        }
        EtaEval {
            eta,
            eta_prime: 1.0 / (1.0 + t * (1.0 / m.variance - d)),
            f_at_eta: eta * gamma - m.cgf + self.c0 - 0.5 * d * eta * eta,
        }
    }

    /// `F(w)` with the cached baseline CGF (used by the potential for the
    /// `F(B)` term).
    pub fn penalty_value(&self, w: f64) -> Result<f64, ProxError> {
        let d = 1.0 / self.sigma2;
        let h = self.prior.invert_mean(w, d)?;
        let c_h = self.prior.cgf(Tilt::new(h, d))?;
        Ok(w * h - c_h + self.c0 - 0.5 * d * w * w)
    }

    /// Inverse of `η(·, t)` at a point `x` of its range: from the prox
    /// stationarity identity, `η(s, t) = x ⟺ s = x + t F'(x)`.
    pub fn eta_inverse(&self, x: f64, t: f64) -> Result<f64, ProxError> {
        if !(t > 0.0) {
            return Err(ProxError::NonPositiveT(t));
        }
        let (lo, hi) = self.prior.support();
        if !(x > lo && x < hi) {
            return Err(ProxError::OutOfRange { x, lo, hi });
        }
        let d = 1.0 / self.sigma2;
        let first = self.prior.invert_mean(x, d)? - d * x;
        Ok(x + t * first)
    }
}
