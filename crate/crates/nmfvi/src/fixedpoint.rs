//! The scalar max-min potential `φ(b, τ)`, its fixed-point system, the damped
//! multi-start solver for `(b*, τ*)`, and post-hoc stationarity checks.
//!
//! The iteration may converge to the wrong fixed point (or not at all) in
//! hard regimes, so the solver runs several initializations, reports whether
//! they agree, and breaks disagreements by maximizing `ψ(b) = min_τ φ(b, τ)`.

use crate::channel::{self, ChannelError, ChannelLaw, QuadratureScheme};
use crate::meanfield::ProblemSpec;
use crate::numerics::scan_then_golden_min;
use crate::par;
use crate::prox::{Denoiser, ProxError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(
        "b-update produced a non-positive value {b_next} (alpha too small or iterate left the valid region)"
    )]
    NonPositiveB { b_next: f64 },
    #[error("no initialization converged within the iteration budget")]
    NoConvergence { trajectories: Vec<InitTrajectory> },
    #[error("solution is not converged; solve first")]
    NotConverged,
    #[error("stationarity verification failed: {}", failed.join(", "))]
    VerificationFailed {
        failed: Vec<String>,
        report: VerifyReport,
    },
}

/// Solved saddle point with convergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointSolution {
    pub b_star: f64,
    pub tau_star: f64,
    /// `κ* = τ* σ² / b*`, the prox width at the saddle.
    pub kappa_star: f64,
    pub phi_value: f64,
    pub residual_tau: f64,
    pub residual_b: f64,
    pub iterations: usize,
    pub converged: bool,
    pub init_used: (f64, f64),
    pub multi_start_agreement: bool,
}

impl FixedPointSolution {
    pub fn channel_law<'a>(
        &self,
        problem: &'a ProblemSpec,
    ) -> Result<ChannelLaw<'a>, ChannelError> {
        ChannelLaw::new(problem, self.tau_star, self.kappa_star)
    }
}

/// Full iterate history of one initialization, kept for diagnosis when
/// nothing converges.
#[derive(Debug, Clone, Serialize)]
pub struct InitTrajectory {
    pub init: (f64, f64),
    pub iterates: Vec<(f64, f64)>,
    pub residual: (f64, f64),
    pub converged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Damping factor in (0, 1]; 1 is the undamped iteration.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Starting points; empty means the default spread around `(1, σ)`.
    pub inits: Vec<(f64, f64)>,
    /// Aitken delta-squared extrapolation every few steps (off by default;
    /// damping alone is the robust choice in hard regimes).
    pub aitken: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 500,
            inits: Vec::new(),
            aitken: false,
        }
    }
}

impl SolveOptions {
    pub fn default_inits(sigma: f64) -> Vec<(f64, f64)> {
        vec![
            (0.5, 2.0 * sigma),
            (1.0, sigma + 1.0),
            (2.0, 5.0 * sigma),
            (0.1, 1.1 * sigma),
        ]
    }
}

/// One fixed-point update evaluated at `(b, τ)`.
#[derive(Debug, Clone, Copy)]
pub struct StepValues {
    pub tau_next: f64,
    /// From the `η'` form of the b-equation.
    pub b_next: f64,
    /// From the `Z·η` form; equals `b_next` up to quadrature error by
    /// Gaussian integration by parts.
    pub b_next_alt: f64,
    /// `E[(η(τZ+B, τσ²/b) − B)²]`.
    pub mean_square_error: f64,
}

/// Solver context: problem, quadrature scheme, and a certified denoiser.
pub struct FixedPoint<'a> {
    problem: &'a ProblemSpec,
    scheme: &'a QuadratureScheme,
    denoiser: Denoiser<'a>,
}

impl<'a> FixedPoint<'a> {
    /// Certifies convexity (via the denoiser) and validates the scheme.
    pub fn new(
        problem: &'a ProblemSpec,
        scheme: &'a QuadratureScheme,
    ) -> Result<Self, FixedPointError> {
        scheme.validate()?;
        let denoiser = Denoiser::new(&problem.prior, problem.sigma2)?;
        Ok(FixedPoint {
            problem,
            scheme,
            denoiser,
        })
    }

    pub fn denoiser(&self) -> &Denoiser<'a> {
        &self.denoiser
    }

    pub fn problem(&self) -> &ProblemSpec {
        self.problem
    }

    /// Upper end of the τ search interval used by `ψ`.
    fn tau_max(&self) -> f64 {
        let p = self.problem;
        100.0 * (p.sigma2 + p.truth_second_moment() / p.alpha).sqrt()
    }

    /// `φ(b, τ)`: the scalar max-min potential. The inner minimum is
    /// evaluated through the prox identity `argmin_w = η(τZ+B, τσ²/b) − B`;
    /// at `b = 0` all terms vanish and `φ = 0`.
    ///
    /// Same tensor nodes as `expect_bz`, but with an explicit row loop so
    /// `F(B)` is computed once per `B` node and `F(η)` comes out of the prox
    /// solve for free.
    pub fn phi(&self, b: f64, tau: f64) -> Result<f64, FixedPointError> {
        let p = self.problem;
        if b == 0.0 {
            return Ok(0.0);
        }
        let kappa = tau * p.sigma2 / b;
        let den = &self.denoiser;
        let b_nodes = channel::b_nodes(p, self.scheme)?;
        let z_nodes = channel::z_nodes(self.scheme);
        let rows = par::map_collect(&b_nodes, |&(wb, bv)| -> Result<f64, ProxError> {
            let f_b = den.penalty_value(bv)?;
            let mut acc = 0.0;
            for &(wz, z) in &z_nodes {
                let ev = den.eta_eval(tau * z + bv, kappa)?;
                let w = ev.eta - bv;
                acc += wz * (b / (2.0 * tau) * w * w - b * z * w + p.sigma2 * (ev.f_at_eta - f_b));
            }
            Ok(wb * acc)
        });
        let mut expected = 0.0;
        for row in rows {
            expected += row?;
        }
        if !expected.is_finite() {
            return Err(FixedPointError::Channel(ChannelError::NonFinite {
                b: f64::NAN,
                z: f64::NAN,
            }));
        }
        Ok(0.5 * b * (p.sigma2 / tau + tau) - 0.5 * b * b + expected / p.alpha)
    }

    /// One Jacobi-style fixed-point update at `(b, τ)`.
    pub fn step(&self, b: f64, tau: f64) -> Result<StepValues, FixedPointError> {
        let p = self.problem;
        let kappa = tau * p.sigma2 / b;
        let den = &self.denoiser;
        let moments = channel::expect_bz_vec::<3, _>(p, self.scheme, |bv, z| {
            match den.eta_with_prime(tau * z + bv, kappa) {
                Ok((eta, eta_prime)) => {
                    let dev = eta - bv;
                    [dev * dev, eta_prime, z * eta]
                }
                Err(_) => [f64::NAN, f64::NAN, f64::NAN],
            }
        })?;
        let [mean_square_error, mean_eta_prime, mean_z_eta] = moments;
        let tau_next = (p.sigma2 + mean_square_error / p.alpha).sqrt();
        let b_next = tau * (1.0 - mean_eta_prime / p.alpha);
        let b_next_alt = tau - mean_z_eta / p.alpha;
        if b_next <= 0.0 {
            return Err(FixedPointError::NonPositiveB { b_next });
        }
        Ok(StepValues {
            tau_next,
            b_next,
            b_next_alt,
            mean_square_error,
        })
    }

    /// `ψ(b) = min_{τ ∈ [σ, τ_max]} φ(b, τ)` by grid scan plus golden
    /// section. The x-tolerance 1e-5 puts the value error near 1e-10 at a
    /// quadratic minimum.
    pub fn psi(&self, b: f64) -> Result<f64, FixedPointError> {
        let sigma = self.problem.sigma();
        let phi_of_tau = |tau: f64| self.phi(b, tau).unwrap_or(f64::INFINITY);
        let (_, value) = scan_then_golden_min(&phi_of_tau, sigma, self.tau_max(), 32, 1e-5);
        Ok(value)
    }

    /// Damped fixed-point iteration from every initialization; among the
    /// converged candidates, disagreements are broken by maximizing `ψ`.
    pub fn solve(&self, opts: &SolveOptions) -> Result<FixedPointSolution, FixedPointError> {
        let sigma = self.problem.sigma();
        let inits = if opts.inits.is_empty() {
            SolveOptions::default_inits(sigma)
        } else {
            opts.inits.clone()
        };
        let runs = par::map_collect(&inits, |&init| self.run_single(init, opts));

        let converged: Vec<&SingleRun> = runs.iter().filter(|r| r.converged).collect();
        if converged.is_empty() {
            return Err(FixedPointError::NoConvergence {
                trajectories: runs.into_iter().map(|r| r.trajectory).collect(),
            });
        }
        let agreement = converged.iter().all(|r| {
            (r.b - converged[0].b).abs() <= 1e-6 && (r.tau - converged[0].tau).abs() <= 1e-6
        });

        let chosen = if agreement {
            // All runs found the same point; take the tightest residual.
            converged
                .iter()
                .min_by(|a, b| {
                    let ra = a.residual.0.abs().max(a.residual.1.abs());
                    let rb = b.residual.0.abs().max(b.residual.1.abs());
                    ra.total_cmp(&rb)
                })
                .unwrap()
        } else {
            // Multiple fixed points: pick the max-min optimizer.
            let psis = par::map_collect(&converged, |r| self.psi(r.b).unwrap_or(f64::NEG_INFINITY));
            let best = psis
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            converged[best]
        };

        let phi_value = self.phi(chosen.b, chosen.tau)?;
        Ok(FixedPointSolution {
            b_star: chosen.b,
            tau_star: chosen.tau,
            kappa_star: chosen.tau * self.problem.sigma2 / chosen.b,
            phi_value,
            residual_tau: chosen.residual.1,
            residual_b: chosen.residual.0,
            iterations: chosen.iterations,
            converged: true,
            init_used: chosen.trajectory.init,
            multi_start_agreement: agreement,
        })
    }

    fn run_single(&self, init: (f64, f64), opts: &SolveOptions) -> SingleRun {
        let sigma = self.problem.sigma();
        let alpha = self.problem.alpha;
        let (mut b, mut tau) = init;
        tau = tau.max(sigma);
        let mut iterates = vec![(b, tau)];
        let mut residual = (f64::INFINITY, f64::INFINITY);
        let mut failure = None;
        let mut converged = false;
        let mut iterations = 0;
        let mut history: Vec<(f64, f64)> = Vec::new();

        for iter in 0..opts.max_iter {
            iterations = iter + 1;
            let step = match self.step(b, tau) {
                Ok(s) => s,
                Err(err) => {
                    failure = Some(err.to_string());
                    break;
                }
            };
            let r_b = step.b_next - b;
            let r_tau = step.tau_next - tau;
            residual = (r_b, r_tau);
            // The extra τ² guard keeps the MSE identity
            // E[(η−B)²] = α(τ*² − σ²) assertable at 1e-8 downstream.
            let identity_gap = alpha * (step.tau_next - tau).abs() * (step.tau_next + tau);
            if r_b.abs().max(r_tau.abs()) < opts.tol && identity_gap < 5e-9 {
                b = step.b_next;
                tau = step.tau_next;
                iterates.push((b, tau));
                converged = true;
                break;
            }
            b += opts.damping * r_b;
            tau = (tau + opts.damping * r_tau).max(sigma);
            if opts.aitken {
                history.push((b, tau));
                if history.len() >= 3 && history.len().is_multiple_of(4) {
                    let k = history.len();
                    let accel = |x0: f64, x1: f64, x2: f64| {
                        let denom = (x2 - x1) - (x1 - x0);
                        if denom.abs() > 1e-14 {
                            x2 - (x2 - x1) * (x2 - x1) / denom
                        } else {
                            x2
                        }
                    };
                    let ba = accel(history[k - 3].0, history[k - 2].0, history[k - 1].0);
                    let ta = accel(history[k - 3].1, history[k - 2].1, history[k - 1].1);
                    if ba > 0.0 && ba.is_finite() && ta.is_finite() && ta >= sigma {
                        b = ba;
                        tau = ta;
                    }
                }
            }
            iterates.push((b, tau));
            if b <= 0.0 {
                failure = Some("damped iterate left b > 0".to_string());
                break;
            }
        }

        SingleRun {
            b,
            tau,
            residual,
            converged,
            iterations,
            trajectory: InitTrajectory {
                init,
                iterates,
                residual,
                converged,
                failure,
            },
        }
    }

    /// Stationarity and shape diagnostics at a converged solution:
    /// (i) finite-difference gradient of `φ` vanishes at `(b*, τ*)`,
    /// (ii) `ψ` is concave on a 21-point grid around `b*`,
    /// (iii) `∂φ/∂τ` at `τ = σ` is negative.
    pub fn verify(&self, sol: &FixedPointSolution) -> Result<VerifyReport, FixedPointError> {
        if !sol.converged {
            return Err(FixedPointError::NotConverged);
        }
        let (b, tau) = (sol.b_star, sol.tau_star);
        let hb = 1e-4 * b.abs().max(1.0);
        let ht = 1e-4 * tau.abs().max(1.0);
        let grad_b = (self.phi(b + hb, tau)? - self.phi(b - hb, tau)?) / (2.0 * hb);
        let grad_tau = (self.phi(b, tau + ht)? - self.phi(b, tau - ht)?) / (2.0 * ht);
        let stationary = grad_b.abs() < 1e-5 && grad_tau.abs() < 1e-5;

        let bs: Vec<f64> = (0..21).map(|i| b * (0.5 + i as f64 / 20.0)).collect();
        let psis = par::map_collect(&bs, |&bi| self.psi(bi).unwrap_or(f64::NAN));
        let mut max_second_diff = f64::NEG_INFINITY;
        for w in psis.windows(3) {
            max_second_diff = max_second_diff.max(w[2] - 2.0 * w[1] + w[0]);
        }
        let psi_concave = max_second_diff <= 1e-6;

        // Analytic form: dφ/dτ = (b/2τ²)(τ² − σ² − E[(η−B)²]/α), strictly
        // negative at τ = σ whenever the truth is non-degenerate.
        let sigma = self.problem.sigma();
        let at_sigma = self.step(b, sigma)?;
        let dphi_dtau_at_sigma =
            b / (2.0 * sigma * sigma) * (sigma * sigma - at_sigma.tau_next * at_sigma.tau_next);
        let boundary_ok = dphi_dtau_at_sigma < 0.0;

        let report = VerifyReport {
            grad_b,
            grad_tau,
            stationary,
            psi_max_second_diff: max_second_diff,
            psi_concave,
            dphi_dtau_at_sigma,
            boundary_ok,
        };
        let mut failed = Vec::new();
        if !stationary {
            failed.push(format!(
                "gradient not stationary ({grad_b:.2e}, {grad_tau:.2e})"
            ));
        }
        if !psi_concave {
            failed.push(format!("psi second difference {max_second_diff:.2e} > 0"));
        }
        if !boundary_ok {
            failed.push(format!(
                "dphi/dtau({sigma}) = {dphi_dtau_at_sigma:.2e} not negative"
            ));
        }
        if failed.is_empty() {
            Ok(report)
        } else {
            Err(FixedPointError::VerificationFailed { failed, report })
        }
    }
}

struct SingleRun {
    b: f64,
    tau: f64,
    residual: (f64, f64),
    converged: bool,
    iterations: usize,
    trajectory: InitTrajectory,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub grad_b: f64,
    pub grad_tau: f64,
    pub stationary: bool,
    pub psi_max_second_diff: f64,
    pub psi_concave: bool,
    pub dphi_dtau_at_sigma: f64,
    pub boundary_ok: bool,
}
