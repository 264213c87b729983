//! Synthetic-data harness: generate regression instances, minimize the NMF
//! objective `M_p` by backtracking gradient descent, and measure empirical
//! MSE, evidence, coverage, and a sliced Wasserstein-2 distance against the
//! predicted limit law. Includes an exact evidence oracle for Gaussian
//! priors (log-determinant route) used to exhibit the ELBO gap.
//!
//! Replicates run independently (seeds `seed + 0 .. seed + R-1`) and reduce
//! in replicate order; matrix products parallelize over fixed row chunks
//! with ordered reduction, so results are identical for any thread count.

use crate::channel::{ChannelError, QuadratureScheme};
use crate::fixedpoint::FixedPointSolution;
use crate::meanfield::{self, MeanFieldError, ProblemSpec};
use crate::par;
use crate::predictions::{PredictionError, Predictor};
use crate::priors::{PriorError, PriorSpec, Tilt};
use crate::prox::ProxError;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("convexity of F is not certified; refusing to run the optimizer")]
    NotConvexCertified,
    #[error("exact evidence oracle requires a Gaussian prior")]
    NotGaussianPrior,
    #[error("coordinate {index} (u = {value}) left the prior support")]
    OutOfSupport { index: usize, value: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DesignKind {
    GaussianIid,
    LaplaceIid,
}

/// Backtracking gradient descent settings (Armijo condition, halving step).
#[derive(Debug, Clone, Serialize)]
pub struct OptimizerOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            grad_tol: 1e-8,
            max_iter: 5000,
            armijo_c: 1e-4,
            backtrack: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub design: DesignKind,
    pub replicates: usize,
    pub optimizer: OptimizerOptions,
    pub zeta_list: Vec<f64>,
    pub w2: W2Options,
}

impl SimConfig {
    pub fn new(n: usize, p: usize, seed: u64) -> Self {
        SimConfig {
            n,
            p,
            seed,
            design: DesignKind::GaussianIid,
            replicates: 1,
            optimizer: OptimizerOptions::default(),
            zeta_list: vec![0.05],
            w2: W2Options::default(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 || self.p == 0 || self.replicates == 0 {
            return Err(SimError::InvalidConfig(
                "n, p, and replicates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sliced-W2 comparison settings.
#[derive(Debug, Clone, Serialize)]
pub struct W2Options {
    pub channel_samples: usize,
    pub num_projections: usize,
    pub seed: u64,
}

impl Default for W2Options {
    fn default() -> Self {
        W2Options {
            channel_samples: 100_000,
            num_projections: 128,
            seed: 0x51_1CED,
        }
    }
}

/// One synthetic regression instance `y = X β* + ε` with the per-coordinate
/// curvatures `d_i = (XᵀX)_{ii}/σ²`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub beta_star: Array1<f64>,
    pub epsilon: Array1<f64>,
    pub d: Vec<f64>,
}

/// β* iid from the truth prior, ε iid `N(0, σ²)`, design entries of variance
/// `1/n` (Gaussian, or Laplace with scale `√2/2` before the `1/√n` scaling).
/// Fully deterministic per seed.
pub fn gen_data(problem: &ProblemSpec, cfg: &SimConfig) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let (n, p) = (cfg.n, cfg.p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta_star = Array1::from_vec(problem.truth.sample_with_rng(&mut rng, p));
    let sigma = problem.sigma();
    let epsilon: Array1<f64> =
        Array1::from_iter((0..n).map(|_| {
            sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        }));
    let scale = 1.0 / (n as f64).sqrt();
    let laplace_scale = std::f64::consts::SQRT_2 / 2.0;
    let entries: Vec<f64> = (0..n * p)
        .map(|_| match cfg.design {
            DesignKind::GaussianIid => {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            }
            DesignKind::LaplaceIid => {
                // Inverse-CDF Laplace draw with variance 1 before scaling.
                let u = rng.random::<f64>() - 0.5;
                let l = -laplace_scale * u.signum() * (1.0f64 - 2.0 * u.abs()).ln();
                scale * l
            }
        })
        .collect();
    let x = Array2::from_shape_vec((n, p), entries).expect("row-major design");
    let y = &matvec(&x, beta_star.as_slice().unwrap()) + &epsilon;
    let d = column_square_norms(&x)
        .into_iter()
        .map(|c| c / problem.sigma2)
        .collect();
    Ok(Dataset {
        x,
        y,
        beta_star,
        epsilon,
        d,
    })
}

const ROW_CHUNK: usize = 256;

/// `X v`, parallel over fixed row chunks; each output entry is an
/// independent sequential dot product, so the result is thread-count
/// invariant.
pub(crate) fn matvec(x: &Array2<f64>, v: &[f64]) -> Array1<f64> {
    let (n, p) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let lo = c * ROW_CHUNK;
        let hi = ((c + 1) * ROW_CHUNK).min(n);
        let mut out = Vec::with_capacity(hi - lo);
        for row in lo..hi {
            let r = &xs[row * p..(row + 1) * p];
            out.push(r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>());
        }
        out
    });
    Array1::from_vec(parts.concat())
}

/// `Xᵀ r`, parallel over fixed row chunks with partial p-vectors summed in
/// chunk order (deterministic for any thread count).
pub(crate) fn matvec_t(x: &Array2<f64>, r: &[f64]) -> Array1<f64> {
    let (n, p) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let lo = c * ROW_CHUNK;
        let hi = ((c + 1) * ROW_CHUNK).min(n);
        let mut acc = vec![0.0; p];
        for row in lo..hi {
            let w = r[row];
            let xr = &xs[row * p..(row + 1) * p];
            for (a, &v) in acc.iter_mut().zip(xr) {
                *a += w * v;
            }
        }
        acc
    });
    let mut total = vec![0.0; p];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Array1::from_vec(total)
}

fn column_square_norms(x: &Array2<f64>) -> Vec<f64> {
    let (n, p) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let lo = c * ROW_CHUNK;
        let hi = ((c + 1) * ROW_CHUNK).min(n);
        let mut acc = vec![0.0; p];
        for row in lo..hi {
            let xr = &xs[row * p..(row + 1) * p];
            for (a, &v) in acc.iter_mut().zip(xr) {
                *a += v * v;
            }
        }
        acc
    });
    let mut total = vec![0.0; p];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Per-coordinate penalty `Σ G(u_i, d_i) − d_i u_i²/2` with the baseline
/// CGFs `c(0, d_i)` cached.
struct PenaltyEval<'a> {
    prior: &'a PriorSpec,
    d: &'a [f64],
    c0: Vec<f64>,
}

impl<'a> PenaltyEval<'a> {
    fn new(prior: &'a PriorSpec, d: &'a [f64]) -> Result<Self, SimError> {
        let c0 = d
            .iter()
            .map(|&di| prior.cgf(Tilt::new(0.0, di)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PenaltyEval { prior, d, c0 })
    }

    fn term(&self, i: usize, u: f64) -> Result<f64, PriorError> {
        let di = self.d[i];
        let h = self.prior.invert_mean(u, di)?;
        let c_h = self.prior.cgf(Tilt::new(h, di))?;
        Ok(u * h - c_h + self.c0[i] - 0.5 * di * u * u)
    }

    /// Sum of penalty terms; `+∞` when any coordinate leaves the open
    /// support (the line search treats that as a rejected trial point).
    fn value_or_inf(&self, u: &[f64]) -> f64 {
        let (lo, hi) = self.prior.support();
        let parts = par::map_indexed(u.len(), |i| {
            if !(u[i] > lo && u[i] < hi) {
                return f64::INFINITY;
            }
            self.term(i, u[i]).unwrap_or(f64::INFINITY)
        });
        parts.into_iter().sum()
    }

    /// Penalty gradient components `h(u_i, d_i) − d_i u_i`.
    fn grad(&self, u: &[f64]) -> Result<Vec<f64>, SimError> {
        let (lo, hi) = self.prior.support();
        let parts = par::map_indexed(u.len(), |i| {
            if !(u[i] > lo && u[i] < hi) {
                return Err(i);
            }
            self.prior
                .invert_mean(u[i], self.d[i])
                .map(|h| h - self.d[i] * u[i])
                .map_err(|_| i)
        });
        parts
            .into_iter()
            .zip(u)
            .map(|(r, &ui)| r.map_err(|index| SimError::OutOfSupport { index, value: ui }))
            .collect()
    }
}

/// NMF objective `M_p(u)` and its gradient.
///
/// `M_p(u) = ‖y − Xu‖²/(2σ²) + Σ [G(u_i, d_i) − d_i u_i²/2]`,
/// `∇_i = (Xᵀ(Xu − y))_i/σ² + h(u_i, d_i) − d_i u_i`.
pub fn nmf_objective(
    problem: &ProblemSpec,
    ds: &Dataset,
    u: &Array1<f64>,
) -> Result<(f64, Array1<f64>), SimError> {
    let penalty = PenaltyEval::new(&problem.prior, &ds.d)?;
    let us = u.as_slice().expect("contiguous");
    let resid = &matvec(&ds.x, us) - &ds.y;
    let quad = 0.5 * resid.iter().map(|r| r * r).sum::<f64>() / problem.sigma2;
    let pen = penalty.value_or_inf(us);
    if pen.is_infinite() {
        let (lo, hi) = problem.prior.support();
        let bad = us.iter().position(|&v| !(v > lo && v < hi)).unwrap_or(0);
        return Err(SimError::OutOfSupport {
            index: bad,
            value: us[bad],
        });
    }
    let mut grad = matvec_t(&ds.x, resid.as_slice().unwrap());
    grad.mapv_inplace(|g| g / problem.sigma2);
    let pen_grad = penalty.grad(us)?;
    for (g, pg) in grad.iter_mut().zip(pen_grad) {
        *g += pg;
    }
    Ok((quad + pen, grad))
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizeResult {
    pub u_hat: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a backtracking search could not find descent (signals the
    /// finite-n objective may not be convex along the path).
    pub line_search_failed: bool,
}

/// Gradient descent with Armijo backtracking from `u = 0`, initial step
/// `1/L̂` where `L̂` bounds the quadratic curvature (power iteration on
/// `XᵀX`) plus the penalty curvature on a probe grid.
pub fn minimize_nmf(
    problem: &ProblemSpec,
    ds: &Dataset,
    opts: &OptimizerOptions,
) -> Result<MinimizeResult, SimError> {
    let report = meanfield::check_convexity(&problem.prior, problem.sigma2);
    if !report.certified {
        return Err(SimError::NotConvexCertified);
    }
    let p = ds.x.ncols();
    let penalty = PenaltyEval::new(&problem.prior, &ds.d)?;

    let lipschitz = {
        let op2 = operator_norm_squared(&ds.x);
        let pen_curv = penalty_curvature_bound(&problem.prior, &ds.d);
        1.02 * (op2 / problem.sigma2 + pen_curv)
    };

    let quad_value = |u: &[f64]| {
        let resid = &matvec(&ds.x, u) - &ds.y;
        0.5 * resid.iter().map(|r| r * r).sum::<f64>() / problem.sigma2
    };

    let mut u = vec![0.0; p];
    let mut f = quad_value(&u) + penalty.value_or_inf(&u);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut line_search_failed = false;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let resid = &matvec(&ds.x, &u) - &ds.y;
        let mut grad = matvec_t(&ds.x, resid.as_slice().unwrap());
        grad.mapv_inplace(|g| g / problem.sigma2);
        let pen_grad = penalty.grad(&u)?;
        for (g, pg) in grad.iter_mut().zip(pen_grad) {
            *g += pg;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        grad_norm = g2.sqrt();
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }

        let mut step = 1.0 / lipschitz;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = u
                .iter()
                .zip(grad.iter())
                .map(|(ui, gi)| ui - step * gi)
                .collect();
            let trial_pen = penalty.value_or_inf(&trial);
            let trial_f = if trial_pen.is_finite() {
                quad_value(&trial) + trial_pen
            } else {
                f64::INFINITY
            };
            // Rounding slack: near the optimum the true descent per step
            // drops below the f64 resolution of the objective value.
            let noise = 16.0 * f64::EPSILON * f.abs();
            if trial_f <= f - opts.armijo_c * step * g2 + noise {
                u = trial;
                f = trial_f;
                accepted = true;
                break;
            }
            step *= opts.backtrack;
        }
        if !accepted {
            line_search_failed = true;
            break;
        }
    }

    Ok(MinimizeResult {
        u_hat: u,
        objective: f,
        grad_norm,
        iterations,
        converged,
        line_search_failed,
    })
}

/// Largest eigenvalue of `XᵀX` by power iteration (deterministic start).
fn operator_norm_squared(x: &Array2<f64>) -> f64 {
    let p = x.ncols();
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..40 {
        let xv = matvec(x, &v);
        let xtxv = matvec_t(x, xv.as_slice().unwrap());
        let norm = xtxv.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = xtxv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = xtxv.iter().map(|a| a / norm).collect();
    }
    lambda.max(0.0)
}

/// Upper bound on `G''(u, d) − d` over a probe grid of means and the
/// observed range of `d_i`.
fn penalty_curvature_bound(prior: &PriorSpec, d: &[f64]) -> f64 {
    let d_lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = prior.tilted_quantile(Tilt::ZERO, 1e-6).unwrap_or(-10.0);
    let hi = prior
        .tilted_quantile(Tilt::ZERO, 1.0 - 1e-6)
        .unwrap_or(10.0);
    let (slo, shi) = prior.support();
    let mut bound: f64 = 0.0;
    for &dv in &[d_lo, 0.5 * (d_lo + d_hi), d_hi] {
        for k in 0..33 {
            let mut u = lo + (hi - lo) * k as f64 / 32.0;
            if slo.is_finite() {
                u = u.clamp(slo + 1e-9 * (shi - slo), shi - 1e-9 * (shi - slo));
            }
            if let Ok(h) = prior.invert_mean(u, dv)
                && let Ok(m) = prior.tilted_moments(Tilt::new(h, dv))
            {
                bound = bound.max(1.0 / m.variance - dv);
            }
        }
    }
    bound
}

/// Exact `−(1/p) log Z_p` for a Gaussian prior `N(0, Δ²)`:
/// `‖y‖²/(2σ²p) − bᵀA⁻¹b/(2p) + log det(I + Δ²/σ² XᵀX)/(2p)` with
/// `A = XᵀX/σ² + I/Δ²`, via a Cholesky factorization.
pub fn exact_neg_log_z_gaussian(problem: &ProblemSpec, ds: &Dataset) -> Result<f64, SimError> {
    let PriorSpec::GaussianMeanZero { delta2 } = problem.prior else {
        return Err(SimError::NotGaussianPrior);
    };
    let p = ds.x.ncols();
    let sigma2 = problem.sigma2;
    let xtx = ds.x.t().dot(&ds.x);
    let mut m = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            m[(i, j)] = delta2 / sigma2 * xtx[(i, j)];
        }
        m[(i, i)] += 1.0;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| SimError::InvalidConfig("evidence matrix not positive definite".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let b = matvec_t(&ds.x, ds.y.as_slice().unwrap()).mapv(|v| v / sigma2);
    let b_na = nalgebra::DVector::from_column_slice(b.as_slice().unwrap());
    let z = chol.solve(&b_na);
    let quad = delta2 * b_na.dot(&z);
    let y2: f64 = ds.y.iter().map(|v| v * v).sum();
    let pf = p as f64;
    Ok(y2 / (2.0 * sigma2 * pf) - quad / (2.0 * pf) + log_det / (2.0 * pf))
}

/// Exact squared 1-D Wasserstein-2 distance between two empirical
/// distributions (general sizes) through the quantile coupling.
pub fn w2_squared_1d(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty());
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut q_prev = 0.0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let qi = (i + 1) as f64 / n;
        let qj = (j + 1) as f64 / m;
        let q = qi.min(qj);
        let diff = a[i] - b[j];
        acc += (q - q_prev) * diff * diff;
        q_prev = q;
        if qi <= q + 1e-18 {
            i += 1;
        }
        if qj <= q + 1e-18 {
            j += 1;
        }
    }
    acc
}

/// Sliced squared W2 between two planar point clouds: the average over
/// random unit directions of the squared 1-D W2 between the projections.
/// Deterministic given the seed.
pub fn w2_sliced(a: &[(f64, f64)], b: &[(f64, f64)], num_projections: usize, seed: u64) -> f64 {
    assert!(a.len() >= 2 && b.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<(f64, f64)> = (0..num_projections)
        .map(|_| {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            (theta.cos(), theta.sin())
        })
        .collect();
    let vals = par::map_collect(&dirs, |&(cx, cy)| {
        let pa: Vec<f64> = a.iter().map(|&(u, v)| cx * u + cy * v).collect();
        let pb: Vec<f64> = b.iter().map(|&(u, v)| cx * u + cy * v).collect();
        w2_squared_1d(&pa, &pb)
    });
    vals.iter().sum::<f64>() / num_projections as f64
}

/// One replicate's empirical metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub u_hat: Vec<f64>,
    pub mse_emp: f64,
    pub neg_log_z_nmf_per_p: f64,
    pub coverage_emp: BTreeMap<String, f64>,
    pub coverage_corrected_emp: BTreeMap<String, f64>,
    pub w2_sliced: f64,
    /// Exact 1-D W2² of the two marginals (estimate vs η, signal vs B).
    pub w2_marginal_u: f64,
    pub w2_marginal_beta: f64,
    pub grad_norm_final: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

/// Computes all empirical metrics for a minimized instance against a solved
/// fixed point (needed for the corrected intervals and the limit-law
/// comparison).
pub fn empirical_metrics(
    problem: &ProblemSpec,
    ds: &Dataset,
    minimized: &MinimizeResult,
    scheme: &QuadratureScheme,
    sol: &FixedPointSolution,
    zeta_list: &[f64],
    w2: &W2Options,
) -> Result<SimResult, SimError> {
    let p = ds.x.ncols();
    let pf = p as f64;
    let u = &minimized.u_hat;

    let mse_emp = u
        .iter()
        .zip(ds.beta_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pf;

    let penalty = PenaltyEval::new(&problem.prior, &ds.d)?;
    let c0_sum: f64 = penalty.c0.iter().sum();
    let neg_log_z_nmf_per_p = (minimized.objective - c0_sum) / pf;

    // Per-coordinate credible intervals from the fitted tilts.
    let mut coverage_emp = BTreeMap::new();
    for &zeta in zeta_list {
        let hits = par::map_indexed(p, |i| {
            let tilt = match problem.prior.invert_mean(u[i], ds.d[i]) {
                Ok(h) => Tilt::new(h, ds.d[i]),
                Err(_) => return 0u32,
            };
            let lo = problem.prior.tilted_quantile(tilt, zeta / 2.0);
            let hi = problem.prior.tilted_quantile(tilt, 1.0 - zeta / 2.0);
            match (lo, hi) {
                (Ok(lo), Ok(hi)) => {
                    let b = ds.beta_star[i];
                    u32::from(b >= lo && b <= hi)
                }
                _ => 0,
            }
        });
        let rate = hits.iter().map(|&h| h as f64).sum::<f64>() / pf;
        coverage_emp.insert(format!("{zeta}"), rate);
    }

    // Corrected intervals through the conditional quantiles at each û_i.
    let predictor = Predictor::new(problem, scheme, sol)?;
    let mut coverage_corrected_emp = BTreeMap::new();
    for &zeta in zeta_list {
        let hits = par::map_indexed(p, |i| match predictor.corrected_interval(zeta, u[i]) {
            Ok((lo, hi)) => {
                let b = ds.beta_star[i];
                u32::from(b >= lo && b <= hi)
            }
            Err(_) => 0,
        });
        let rate = hits.iter().map(|&h| h as f64).sum::<f64>() / pf;
        coverage_corrected_emp.insert(format!("{zeta}"), rate);
    }

    // Joint empirical law vs the predicted limit law.
    let law = sol.channel_law(problem)?;
    let channel_samples = law.sample(
        predictor.denoiser(),
        w2.seed ^ 0x9E37_79B9,
        w2.channel_samples,
    )?;
    let joint: Vec<(f64, f64)> = u
        .iter()
        .zip(ds.beta_star.iter())
        .map(|(&a, &b)| (a, b))
        .collect();
    let w2s = w2_sliced(&joint, &channel_samples, w2.num_projections, w2.seed);
    let eta_marg: Vec<f64> = channel_samples.iter().map(|&(e, _)| e).collect();
    let b_marg: Vec<f64> = channel_samples.iter().map(|&(_, b)| b).collect();
    let beta_slice: Vec<f64> = ds.beta_star.to_vec();
    let w2_marginal_u = w2_squared_1d(u, &eta_marg);
    let w2_marginal_beta = w2_squared_1d(&beta_slice, &b_marg);

    Ok(SimResult {
        u_hat: u.clone(),
        mse_emp,
        neg_log_z_nmf_per_p,
        coverage_emp,
        coverage_corrected_emp,
        w2_sliced: w2s,
        w2_marginal_u,
        w2_marginal_beta,
        grad_norm_final: minimized.grad_norm,
        iterations: minimized.iterations,
        converged: minimized.converged,
        line_search_failed: minimized.line_search_failed,
    })
}

/// Runs `cfg.replicates` independent replicates (seeds `seed + r`) and
/// returns their metrics in replicate order.
pub fn run_replicates(
    problem: &ProblemSpec,
    cfg: &SimConfig,
    scheme: &QuadratureScheme,
    sol: &FixedPointSolution,
) -> Result<Vec<SimResult>, SimError> {
    cfg.validate()?;
    let outputs = par::map_indexed(cfg.replicates, |r| {
        let mut local = cfg.clone();
        local.seed = cfg.seed + r as u64;
        local.replicates = 1;
        let ds = gen_data(problem, &local)?;
        let minimized = minimize_nmf(problem, &ds, &local.optimizer)?;
        empirical_metrics(
            problem,
            &ds,
            &minimized,
            scheme,
            sol,
            &local.zeta_list,
            &local.w2,
        )
    });
    outputs.into_iter().collect()
}

const DATASET_MAGIC: &[u8; 5] = b"NMFD1";

impl Dataset {
    /// Flat binary layout: magic `NMFD1`, `u32` n, `u32` p (little endian),
    /// then row-major `X`, `y`, `beta_star` as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        let (n, p) = self.x.dim();
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&(p as u32).to_le_bytes())?;
        for &v in self.x.as_slice().expect("standard layout") {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.y.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.beta_star.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary layout back; `ε` is reconstructed as `y − Xβ*` and
    /// `d` is recomputed from the design and `σ²`.
    pub fn read_binary<R: Read>(mut r: R, sigma2: f64) -> io::Result<Dataset> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let n = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let p = u32::from_le_bytes(buf4) as usize;
        let mut read_f64s = |count: usize| -> io::Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            let mut buf8 = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf8)?;
                out.push(f64::from_le_bytes(buf8));
            }
            Ok(out)
        };
        let x = Array2::from_shape_vec((n, p), read_f64s(n * p)?)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let y = Array1::from_vec(read_f64s(n)?);
        let beta_star = Array1::from_vec(read_f64s(p)?);
        let epsilon = &y - &matvec(&x, beta_star.as_slice().unwrap());
        let d = column_square_norms(&x)
            .into_iter()
            .map(|c| c / sigma2)
            .collect();
        Ok(Dataset {
            x,
            y,
            beta_star,
            epsilon,
            d,
        })
    }
}

/// Mean and standard deviation of a metric across replicates.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::{FixedPoint, SolveOptions};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn ridge_problem() -> ProblemSpec {
        let prior = PriorSpec::gaussian_mean_zero(1.0).unwrap();
        ProblemSpec::well_specified(prior, 1.0, 2.0).unwrap()
    }

    #[test]
    fn gen_data_deterministic_and_scaled() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(100, 50, 3);
        let a = gen_data(&problem, &cfg).unwrap();
        let b = gen_data(&problem, &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        // Average squared column norm concentrates near 1.
        let avg: f64 = column_square_norms(&a.x).iter().sum::<f64>() / 50.0;
        assert!((avg - 1.0).abs() < 0.3, "avg col norm^2 = {avg}");
        // y = X beta + eps holds exactly as constructed.
        let recon = &matvec(&a.x, a.beta_star.as_slice().unwrap()) + &a.epsilon;
        for (u, v) in recon.iter().zip(a.y.iter()) {
            assert_eq!(u, v);
        }
        assert!(a.d.iter().all(|&di| di > 0.0));
    }

    #[test]
    fn laplace_entries_match_variance() {
        let problem = ridge_problem();
        let mut cfg = SimConfig::new(200, 100, 9);
        cfg.design = DesignKind::LaplaceIid;
        let ds = gen_data(&problem, &cfg).unwrap();
        let n = 200.0;
        let var = ds.x.iter().map(|v| v * v).sum::<f64>() / (200.0 * 100.0);
        assert_relative_eq!(var, 1.0 / n, max_relative = 0.05);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let prior = PriorSpec::gaussian_spike_slab(0.5, 0.2).unwrap();
        let problem = ProblemSpec::well_specified(prior, 1.0, 2.0).unwrap();
        let cfg = SimConfig::new(40, 20, 17);
        let ds = gen_data(&problem, &cfg).unwrap();
        let u = Array1::from_vec(ds.beta_star.iter().map(|b| 0.4 * b + 0.01).collect());
        let (_, grad) = nmf_objective(&problem, &ds, &u).unwrap();
        let h = 1e-6;
        for i in (0..20).step_by(3) {
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let (fp, _) = nmf_objective(&problem, &ds, &up).unwrap();
            let (fm, _) = nmf_objective(&problem, &ds, &dn).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn gaussian_penalty_reduces_to_ridge() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(30, 15, 5);
        let ds = gen_data(&problem, &cfg).unwrap();
        let u = Array1::from_vec((0..15).map(|i| 0.1 * i as f64 - 0.7).collect());
        let (value, _) = nmf_objective(&problem, &ds, &u).unwrap();
        let resid = &matvec(&ds.x, u.as_slice().unwrap()) - &ds.y;
        let quad = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
        let ridge_pen = 0.5 * u.iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(value - quad, ridge_pen, epsilon = 1e-10);
    }

    #[test]
    fn zero_u_gradient_is_data_term() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(30, 15, 5);
        let ds = gen_data(&problem, &cfg).unwrap();
        let u = Array1::zeros(15);
        let (_, grad) = nmf_objective(&problem, &ds, &u).unwrap();
        let expected = matvec_t(&ds.x, ds.y.as_slice().unwrap());
        for (g, e) in grad.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*g, -e, epsilon = 1e-12);
        }
    }

    #[test]
    fn minimizer_matches_direct_ridge_solve() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(60, 30, 11);
        let ds = gen_data(&problem, &cfg).unwrap();
        let res = minimize_nmf(&problem, &ds, &OptimizerOptions::default()).unwrap();
        assert!(res.converged);
        // Direct solve of (X^T X + I) u = X^T y through Cholesky.
        let xtx = ds.x.t().dot(&ds.x);
        let mut m = DMatrix::<f64>::zeros(30, 30);
        for i in 0..30 {
            for j in 0..30 {
                m[(i, j)] = xtx[(i, j)];
            }
            m[(i, i)] += 1.0;
        }
        let rhs = matvec_t(&ds.x, ds.y.as_slice().unwrap());
        let sol = m
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_column_slice(
                rhs.as_slice().unwrap(),
            ));
        for (a, b) in res.u_hat.iter().zip(sol.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn toy_zero_data_gives_zero_minimizer() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(2, 2, 1);
        let mut ds = gen_data(&problem, &cfg).unwrap();
        ds.y = Array1::zeros(2);
        let res = minimize_nmf(&problem, &ds, &OptimizerOptions::default()).unwrap();
        for v in &res.u_hat {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn exact_evidence_zero_design() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(10, 5, 2);
        let mut ds = gen_data(&problem, &cfg).unwrap();
        ds.x.fill(0.0);
        ds.d = vec![0.0; 5];
        let v = exact_neg_log_z_gaussian(&problem, &ds).unwrap();
        let y2: f64 = ds.y.iter().map(|y| y * y).sum();
        assert_abs_diff_eq!(v, y2 / (2.0 * 5.0), epsilon = 1e-12);
    }

    #[test]
    fn exact_evidence_scalar_case() {
        // 1x1 design x = 1, y = 1, unit prior and noise:
        // 1/2 [1 - 1/2] + (1/2) log 2.
        let problem = ridge_problem();
        let x = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let y = Array1::from_vec(vec![1.0]);
        let beta_star = Array1::from_vec(vec![0.0]);
        let epsilon = y.clone();
        let ds = Dataset {
            x,
            y,
            beta_star,
            epsilon,
            d: vec![1.0],
        };
        let v = exact_neg_log_z_gaussian(&problem, &ds).unwrap();
        assert_abs_diff_eq!(v, 0.25 + 0.5 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn exact_evidence_requires_gaussian_prior() {
        let prior = PriorSpec::gaussian_spike_slab(0.5, 0.2).unwrap();
        let problem = ProblemSpec::well_specified(prior, 1.0, 2.0).unwrap();
        let cfg = SimConfig::new(10, 5, 2);
        let ds = gen_data(&problem, &cfg).unwrap();
        assert!(matches!(
            exact_neg_log_z_gaussian(&problem, &ds),
            Err(SimError::NotGaussianPrior)
        ));
    }

    #[test]
    fn w2_identical_sets_vanish() {
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|i| (i as f64 * 0.01, -i as f64 * 0.02))
            .collect();
        assert_eq!(w2_sliced(&pts, &pts, 64, 4), 0.0);
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        assert_eq!(w2_squared_1d(&xs, &xs), 0.0);
    }

    #[test]
    fn w2_shift_has_half_projected_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base: Vec<(f64, f64)> = (0..4000)
            .map(|_| {
                let a: f64 =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let b: f64 =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                (a, b)
            })
            .collect();
        let shifted: Vec<(f64, f64)> = base.iter().map(|&(a, b)| (a + 1.0, b)).collect();
        // E[cos^2 theta] = 1/2 exactly under uniform directions; 512 draws
        // push the direction-sampling noise well inside the band.
        let w = w2_sliced(&base, &shifted, 512, 21);
        assert_abs_diff_eq!(w, 0.5, epsilon = 0.05);
    }

    #[test]
    fn w2_1d_unequal_sizes() {
        // W2^2 between {0} and {-1, 1} couples half mass to each side.
        let w = w2_squared_1d(&[0.0], &[-1.0, 1.0]);
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dataset_binary_round_trip() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(12, 7, 8);
        let ds = gen_data(&problem, &cfg).unwrap();
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"NMFD1");
        let back = Dataset::read_binary(buf.as_slice(), problem.sigma2).unwrap();
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.y, back.y);
        assert_eq!(ds.beta_star, back.beta_star);
        for (a, b) in ds.d.iter().zip(back.d.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn replicate_pipeline_small() {
        let problem = ridge_problem();
        let scheme = QuadratureScheme::default();
        let fp = FixedPoint::new(&problem, &scheme).unwrap();
        let sol = fp.solve(&SolveOptions::default()).unwrap();
        let mut cfg = SimConfig::new(160, 80, 77);
        cfg.replicates = 2;
        cfg.w2.channel_samples = 20_000;
        let results = run_replicates(&problem, &cfg, &scheme, &sol).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert!(r.converged);
            assert!(r.grad_norm_final < 1e-8);
            assert!(r.mse_emp > 0.0);
            let cov = r.coverage_emp["0.05"];
            assert!((0.0..=1.0).contains(&cov));
            let cor = r.coverage_corrected_emp["0.05"];
            assert!(
                cor >= cov - 0.1,
                "corrected {cor} should not collapse below {cov}"
            );
        }
        // Replicates differ (different seeds).
        assert_ne!(results[0].mse_emp, results[1].mse_emp);
    }

    #[test]
    fn matvec_parallel_bit_identical() {
        let problem = ridge_problem();
        let cfg = SimConfig::new(300, 101, 4);
        let ds = gen_data(&problem, &cfg).unwrap();
        let v: Vec<f64> = (0..101).map(|i| (i as f64 * 0.37).sin()).collect();
        let wide = par::run_with_threads(8, || matvec(&ds.x, &v));
        let narrow = par::run_with_threads(1, || matvec(&ds.x, &v));
        assert_eq!(wide, narrow);
        let r: Vec<f64> = (0..300).map(|i| (i as f64 * 0.11).cos()).collect();
        let wide_t = par::run_with_threads(8, || matvec_t(&ds.x, &r));
        let narrow_t = par::run_with_threads(1, || matvec_t(&ds.x, &r));
        assert_eq!(wide_t, narrow_t);
    }
}
