//! Symmetric priors, their exponential tilts, and the tilt analytics.
//!
//! A tilt reweights a base prior by `exp(γ₁ x − γ₂ x²/2)`; the log normalizer
//! `c(γ)` is the cumulant generating function, its first two γ₁-derivatives
//! are the tilted mean and variance, and `h(u, d)` inverts the mean map at
//! fixed `γ₂ = d`. These five quantities, plus tilted quantiles and iid
//! sampling, are the only prior-facing operations the rest of the crate uses.
//!
//! Gaussian, spike-and-slab, and three-point priors carry closed forms; the
//! grid-density kind (an arbitrary even log-density sampled on a uniform
//! grid over `[-a, a]`) goes through adaptive Gauss-Kronrod quadrature.

use crate::numerics::{
    self, adaptive_gk, log_sum_exp, log_sum_exp2, newton_bisect, normal_cdf, normal_quantile,
};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Relative quadrature tolerance for grid-density integrals.
const GRID_REL_TOL: f64 = 1e-10;
/// Least grid resolution accepted for grid densities.
const GRID_MIN_NODES: usize = 128;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(
        "tilt (gamma1={gamma1}, gamma2={gamma2}) is not normalizable; need gamma2 > {min_gamma2}"
    )]
    NonNormalizable {
        gamma1: f64,
        gamma2: f64,
        min_gamma2: f64,
    },
    #[error("target {u} lies outside the open support ({lo}, {hi})")]
    OutOfSupport { u: f64, lo: f64, hi: f64 },
    #[error("invalid prior specification: {0}")]
    InvalidSpec(String),
    #[error("quantile level {0} must lie in (0, 1)")]
    BadQuantileLevel(f64),
}

/// An exponential tilt `(γ₁, γ₂)` of a base prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilt {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Tilt {
    pub const ZERO: Tilt = Tilt {
        gamma1: 0.0,
        gamma2: 0.0,
    };

    pub fn new(gamma1: f64, gamma2: f64) -> Self {
        Tilt { gamma1, gamma2 }
    }
}

/// CGF value and the first two γ₁-derivatives of a tilt: `c`, `ċ` (tilted
/// mean), `c̈` (tilted variance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    pub cgf: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Parametric description of a symmetric prior on `ℝ` or `[-a, a]`.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    /// `q δ₀ + (1-q) N(0, Δ²)`.
    GaussianSpikeSlab { q: f64, delta2: f64 },
    /// `N(0, Δ²)`.
    GaussianMeanZero { delta2: f64 },
    /// Masses `(q, (1-q)/2, (1-q)/2)` on `{0, -1, +1}`.
    ThreePointDiscrete { q: f64 },
    /// Density `∝ exp(-V(x))` on `[-a, a]`, `V` sampled on a uniform grid.
    GridDensity(GridDensity),
}

/// Even log-density on a bounded interval, linearly interpolated between
/// uniform grid nodes.
#[derive(Debug, Clone)]
pub struct GridDensity {
    half_width: f64,
    potential: Vec<f64>,
    log_norm: f64,
}

impl GridDensity {
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    fn grid_step(&self) -> f64 {
        2.0 * self.half_width / (self.potential.len() - 1) as f64
    }

    /// Potential at `x`, linear between nodes.
    fn v_at(&self, x: f64) -> f64 {
        let a = self.half_width;
        let t = ((x + a) / self.grid_step()).clamp(0.0, (self.potential.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.potential.len() - 2);
        let frac = t - i as f64;
        self.potential[i] * (1.0 - frac) + self.potential[i + 1] * frac
    }

    /// Integrates `exp(g(x) - shift)` cellwise where `g = γ₁x - γ₂x²/2 - V`.
    /// Returns `(I0, I1, I2)`: the plain, `x`-weighted and `x²`-weighted
    /// integrals, all scaled by `exp(-shift)`.
    fn tilted_integrals(&self, tilt: Tilt, shift: f64) -> (f64, f64, f64) {
        let a = self.half_width;
        let step = self.grid_step();
        let g = |x: f64| tilt.gamma1 * x - 0.5 * tilt.gamma2 * x * x - self.v_at(x) - shift;
        let cells = self.potential.len() - 1;
        let cell_tol = GRID_REL_TOL / cells as f64;
        let mut i0 = 0.0;
        let mut i1 = 0.0;
        let mut i2 = 0.0;
        for c in 0..cells {
            let lo = -a + step * c as f64;
            let hi = -a + step * (c + 1) as f64;
            i0 += adaptive_gk(&|x| g(x).exp(), lo, hi, cell_tol);
            i1 += adaptive_gk(&|x| x * g(x).exp(), lo, hi, cell_tol * a.max(1.0));
            i2 += adaptive_gk(&|x| x * x * g(x).exp(), lo, hi, cell_tol * (a * a).max(1.0));
        }
        (i0, i1, i2)
    }

    /// Max of the tilted log-density over the grid nodes; used to shift the
    /// exponent before integration.
    fn tilted_log_peak(&self, tilt: Tilt) -> f64 {
        let a = self.half_width;
        let step = self.grid_step();
        self.potential
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = -a + step * i as f64;
                tilt.gamma1 * x - 0.5 * tilt.gamma2 * x * x - v
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CDF of the `tilt`-reweighted density at `x`.
    fn tilted_cdf(&self, tilt: Tilt, x: f64) -> f64 {
        let a = self.half_width;
        if x <= -a {
            return 0.0;
        }
        if x >= a {
            return 1.0;
        }
        let shift = self.tilted_log_peak(tilt);
        let (total, _, _) = self.tilted_integrals(tilt, shift);
        let g = |t: f64| (tilt.gamma1 * t - 0.5 * tilt.gamma2 * t * t - self.v_at(t) - shift).exp();
        let partial = adaptive_gk(&g, -a, x, GRID_REL_TOL * total);
        (partial / total).clamp(0.0, 1.0)
    }
}

impl PriorSpec {
    pub fn gaussian_spike_slab(q: f64, delta2: f64) -> Result<Self, PriorError> {
        if !(0.0..1.0).contains(&q) || !q.is_finite() {
            return Err(PriorError::InvalidSpec(format!(
                "spike mass q={q} must lie in [0, 1)"
            )));
        }
        if !(delta2 > 0.0 && delta2.is_finite()) {
            return Err(PriorError::InvalidSpec(format!(
                "slab variance delta2={delta2} must be positive"
            )));
        }
        Ok(PriorSpec::GaussianSpikeSlab { q, delta2 })
    }

    pub fn gaussian_mean_zero(delta2: f64) -> Result<Self, PriorError> {
        if !(delta2 > 0.0 && delta2.is_finite()) {
            return Err(PriorError::InvalidSpec(format!(
                "variance delta2={delta2} must be positive"
            )));
        }
        Ok(PriorSpec::GaussianMeanZero { delta2 })
    }

    pub fn three_point(q: f64) -> Result<Self, PriorError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(PriorError::InvalidSpec(format!(
                "central mass q={q} must lie in (0, 1)"
            )));
        }
        Ok(PriorSpec::ThreePointDiscrete { q })
    }

    /// Grid density from an even potential sampled on a uniform grid over
    /// `[-a, a]` (at least 128 nodes, evenness checked to 1e-10).
    pub fn grid_density(half_width: f64, potential: Vec<f64>) -> Result<Self, PriorError> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(PriorError::InvalidSpec(format!(
                "half width {half_width} must be positive"
            )));
        }
        if potential.len() < GRID_MIN_NODES {
            return Err(PriorError::InvalidSpec(format!(
                "potential grid has {} nodes; need at least {GRID_MIN_NODES}",
                potential.len()
            )));
        }
        let n = potential.len();
        for i in 0..n / 2 {
            if (potential[i] - potential[n - 1 - i]).abs() > 1e-10 {
                return Err(PriorError::InvalidSpec(format!(
                    "potential is not even: V[{i}] = {} vs V[{}] = {}",
                    potential[i],
                    n - 1 - i,
                    potential[n - 1 - i]
                )));
            }
        }
        if potential.iter().any(|v| !v.is_finite()) {
            return Err(PriorError::InvalidSpec(
                "potential contains non-finite values".into(),
            ));
        }
        let mut grid = GridDensity {
            half_width,
            potential,
            log_norm: 0.0,
        };
        let shift = grid.tilted_log_peak(Tilt::ZERO);
        let (i0, _, _) = grid.tilted_integrals(Tilt::ZERO, shift);
        grid.log_norm = shift + i0.ln();
        Ok(PriorSpec::GridDensity(grid))
    }

    /// Open support endpoints `(m(π), M(π))`.
    pub fn support(&self) -> (f64, f64) {
        match self {
            PriorSpec::GaussianSpikeSlab { .. } | PriorSpec::GaussianMeanZero { .. } => {
                (f64::NEG_INFINITY, f64::INFINITY)
            }
            PriorSpec::ThreePointDiscrete { .. } => (-1.0, 1.0),
            PriorSpec::GridDensity(g) => (-g.half_width, g.half_width),
        }
    }

    /// Second moment of the untilted prior.
    pub fn second_moment(&self) -> f64 {
        match self {
            PriorSpec::GaussianSpikeSlab { q, delta2 } => (1.0 - q) * delta2,
            PriorSpec::GaussianMeanZero { delta2 } => *delta2,
            PriorSpec::ThreePointDiscrete { q } => 1.0 - q,
            PriorSpec::GridDensity(_) => {
                self.tilted_moments(Tilt::ZERO)
                    .expect("untilted grid moments")
                    .variance
            }
        }
    }

    /// True when the prior carries a point mass (relevant for quantile jumps
    /// and the coverage functional's continuity caveat).
    pub fn has_atom(&self) -> bool {
        matches!(
            self,
            PriorSpec::GaussianSpikeSlab { q, .. } if *q > 0.0
        ) || matches!(self, PriorSpec::ThreePointDiscrete { .. })
    }

    fn check_normalizable(&self, tilt: Tilt) -> Result<(), PriorError> {
        match self {
            PriorSpec::GaussianSpikeSlab { delta2, .. }
            | PriorSpec::GaussianMeanZero { delta2 } => {
                if tilt.gamma2 <= -1.0 / delta2 {
                    return Err(PriorError::NonNormalizable {
                        gamma1: tilt.gamma1,
                        gamma2: tilt.gamma2,
                        min_gamma2: -1.0 / delta2,
                    });
                }
                Ok(())
            }
            // Bounded support: every real gamma2 integrates.
            PriorSpec::ThreePointDiscrete { .. } | PriorSpec::GridDensity(_) => Ok(()),
        }
    }

    /// Cumulant generating function `c(γ) = log ∫ exp(γ₁x − γ₂x²/2) dπ`.
    pub fn cgf(&self, tilt: Tilt) -> Result<f64, PriorError> {
        Ok(self.tilted_moments(tilt)?.cgf)
    }

    /// CGF together with the tilted mean (`ċ`) and variance (`c̈`).
    pub fn tilted_moments(&self, tilt: Tilt) -> Result<TiltedMoments, PriorError> {
        self.check_normalizable(tilt)?;
        match self {
            PriorSpec::GaussianMeanZero { delta2 } => {
                let rho = 1.0 / delta2 + tilt.gamma2;
                Ok(TiltedMoments {
                    cgf: -0.5 * (delta2 * rho).ln() + tilt.gamma1 * tilt.gamma1 / (2.0 * rho),
                    mean: tilt.gamma1 / rho,
                    variance: 1.0 / rho,
                })
            }
            PriorSpec::GaussianSpikeSlab { q, delta2 } => {
                let rho = 1.0 / delta2 + tilt.gamma2;
                let slab_cgf = -0.5 * (delta2 * rho).ln() + tilt.gamma1 * tilt.gamma1 / (2.0 * rho);
                let log_w0 = q.ln();
                let log_ws = (1.0 - q).ln() + slab_cgf;
                let cgf = log_sum_exp2(log_w0, log_ws);
                let w_slab = (log_ws - cgf).exp();
                let slab_mean = tilt.gamma1 / rho;
                let mean = w_slab * slab_mean;
                let ex2 = w_slab * (1.0 / rho + slab_mean * slab_mean);
                Ok(TiltedMoments {
                    cgf,
                    mean,
                    variance: ex2 - mean * mean,
                })
            }
            PriorSpec::ThreePointDiscrete { q } => {
                let half = (0.5 * (1.0 - q)).ln();
                let logs = [
                    q.ln(),
                    half - tilt.gamma1 - 0.5 * tilt.gamma2,
                    half + tilt.gamma1 - 0.5 * tilt.gamma2,
                ];
                let cgf = log_sum_exp(&logs);
                let p_neg = (logs[1] - cgf).exp();
                let p_pos = (logs[2] - cgf).exp();
                let mean = p_pos - p_neg;
                let ex2 = p_pos + p_neg;
                Ok(TiltedMoments {
                    cgf,
                    mean,
                    variance: ex2 - mean * mean,
                })
            }
            PriorSpec::GridDensity(g) => {
                let shift = g.tilted_log_peak(tilt);
                let (i0, i1, i2) = g.tilted_integrals(tilt, shift);
                let mean = i1 / i0;
                let ex2 = i2 / i0;
                Ok(TiltedMoments {
                    cgf: shift + i0.ln() - g.log_norm,
                    mean,
                    variance: ex2 - mean * mean,
                })
            }
        }
    }

    /// Inverse-mean map `h(u, d)`: the unique `γ₁` whose `(γ₁, d)`-tilt has
    /// mean `u`. Bracketed Newton on the strictly increasing tilted mean.
    pub fn invert_mean(&self, u: f64, d: f64) -> Result<f64, PriorError> {
        let (lo, hi) = self.support();
        if !(u > lo && u < hi) || !u.is_finite() {
            return Err(PriorError::OutOfSupport { u, lo, hi });
        }
        self.check_normalizable(Tilt::new(0.0, d))?;
        if u == 0.0 {
            // Symmetric priors pin h(0, d) = 0 exactly.
            return Ok(0.0);
        }
        if let PriorSpec::GaussianMeanZero { delta2 } = self {
            return Ok(u * (1.0 / delta2 + d));
        }
        let mean_at = |g1: f64| {
            let m = self
                .tilted_moments(Tilt::new(g1, d))
                .expect("normalizability fixed by gamma2");
            (m.mean - u, m.variance)
        };
        // Geometric bracket expansion from [-1, 1].
        let mut blo = -1.0_f64;
        let mut bhi = 1.0_f64;
        for _ in 0..200 {
            let lo_val = mean_at(blo).0;
            let hi_val = mean_at(bhi).0;
            if lo_val <= 0.0 && hi_val >= 0.0 {
                break;
            }
            if lo_val > 0.0 {
                blo *= 2.0;
            }
            if hi_val < 0.0 {
                bhi *= 2.0;
            }
        }
        let tol = 1e-13 * (1.0 + u.abs());
        match newton_bisect(mean_at, blo, bhi, 0.0, tol, 200) {
            Ok(g1) => Ok(g1),
            Err(numerics::RootError::NoConvergence { residual, at }) if residual <= 1e-10 => Ok(at),
            Err(err) => Err(PriorError::InvalidSpec(format!(
                "inverse-mean solve failed for u={u}, d={d}: {err:?}"
            ))),
        }
    }

    /// CDF of the tilted distribution at `x` (atoms included).
    pub fn tilted_cdf(&self, tilt: Tilt, x: f64) -> Result<f64, PriorError> {
        self.check_normalizable(tilt)?;
        match self {
            PriorSpec::GaussianMeanZero { .. } => {
                let m = self.tilted_moments(tilt)?;
                Ok(normal_cdf((x - m.mean) / m.variance.sqrt()))
            }
            PriorSpec::GaussianSpikeSlab { q, delta2 } => {
                let rho = 1.0 / delta2 + tilt.gamma2;
                let slab_cgf = -0.5 * (delta2 * rho).ln() + tilt.gamma1 * tilt.gamma1 / (2.0 * rho);
                let cgf = log_sum_exp2(q.ln(), (1.0 - q).ln() + slab_cgf);
                let w0 = (q.ln() - cgf).exp();
                let ws = 1.0 - w0;
                let slab_mean = tilt.gamma1 / rho;
                let slab_sd = rho.sqrt().recip();
                let mut cdf = ws * normal_cdf((x - slab_mean) / slab_sd);
                if x >= 0.0 {
                    cdf += w0;
                }
                Ok(cdf.clamp(0.0, 1.0))
            }
            PriorSpec::ThreePointDiscrete { .. } => {
                let (weights, values) = self.three_point_weights(tilt)?;
                let mut cdf = 0.0;
                for (w, v) in weights.iter().zip(values.iter()) {
                    if *v <= x {
                        cdf += w;
                    }
                }
                Ok(cdf.min(1.0))
            }
            PriorSpec::GridDensity(g) => Ok(g.tilted_cdf(tilt, x)),
        }
    }

    fn three_point_weights(&self, tilt: Tilt) -> Result<([f64; 3], [f64; 3]), PriorError> {
        let PriorSpec::ThreePointDiscrete { q } = self else {
            unreachable!("three_point_weights on a non-discrete prior")
        };
        let half = (0.5 * (1.0 - q)).ln();
        let logs = [
            half - tilt.gamma1 - 0.5 * tilt.gamma2,
            q.ln(),
            half + tilt.gamma1 - 0.5 * tilt.gamma2,
        ];
        let cgf = log_sum_exp(&logs);
        Ok((
            [
                (logs[0] - cgf).exp(),
                (logs[1] - cgf).exp(),
                (logs[2] - cgf).exp(),
            ],
            [-1.0, 0.0, 1.0],
        ))
    }

    /// Generalized inverse CDF `inf{x : CDF(x) ≥ t}` of the tilted
    /// distribution. Atoms create CDF jumps; levels landing inside a jump
    /// return the atom location.
    pub fn tilted_quantile(&self, tilt: Tilt, t: f64) -> Result<f64, PriorError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(PriorError::BadQuantileLevel(t));
        }
        self.check_normalizable(tilt)?;
        match self {
            PriorSpec::GaussianMeanZero { .. } => {
                let m = self.tilted_moments(tilt)?;
                Ok(m.mean + m.variance.sqrt() * normal_quantile(t))
            }
            PriorSpec::GaussianSpikeSlab { q, delta2 } => {
                let rho = 1.0 / delta2 + tilt.gamma2;
                let slab_cgf = -0.5 * (delta2 * rho).ln() + tilt.gamma1 * tilt.gamma1 / (2.0 * rho);
                let cgf = log_sum_exp2(q.ln(), (1.0 - q).ln() + slab_cgf);
                let w0 = (q.ln() - cgf).exp();
                let ws = 1.0 - w0;
                let slab_mean = tilt.gamma1 / rho;
                let slab_sd = rho.sqrt().recip();
                // CDF just below the atom, and just at it.
                let below = ws * normal_cdf((0.0 - slab_mean) / slab_sd);
                if t <= below {
                    Ok(slab_mean + slab_sd * normal_quantile((t / ws).min(1.0 - 1e-16)))
                } else if t <= below + w0 {
                    Ok(0.0)
                } else {
                    let level = ((t - w0) / ws).clamp(1e-300, 1.0 - 1e-16);
                    Ok(slab_mean + slab_sd * normal_quantile(level))
                }
            }
            PriorSpec::ThreePointDiscrete { .. } => {
                let (weights, values) = self.three_point_weights(tilt)?;
                let mut acc = 0.0;
                for (w, v) in weights.iter().zip(values.iter()) {
                    acc += w;
                    if t <= acc + 1e-15 {
                        return Ok(*v);
                    }
                }
                Ok(values[2])
            }
            PriorSpec::GridDensity(g) => {
                let a = g.half_width;
                let pred = |x: f64| g.tilted_cdf(tilt, x) >= t;
                if pred(-a) {
                    return Ok(-a);
                }
                Ok(numerics::bisect_transition(&pred, -a, a, 1e-12 * a))
            }
        }
    }

    /// `m` iid draws, deterministic for a given seed.
    pub fn sample(&self, seed: u64, m: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with_rng(&mut rng, m)
    }

    /// Draws from an externally managed RNG stream (one value per draw for
    /// the closed-form kinds, so streams are easy to reason about).
    pub fn sample_with_rng<R: Rng>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        match self {
            PriorSpec::GaussianMeanZero { delta2 } => {
                let sd = delta2.sqrt();
                (0..m)
                    .map(|_| {
                        sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    })
                    .collect()
            }
            PriorSpec::GaussianSpikeSlab { q, delta2 } => {
                let sd = delta2.sqrt();
                (0..m)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let z: f64 =
                            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                        if u < *q { 0.0 } else { sd * z }
                    })
                    .collect()
            }
            PriorSpec::ThreePointDiscrete { q } => (0..m)
                .map(|_| {
                    let u: f64 = rng.random();
                    if u < *q {
                        0.0
                    } else if u < q + 0.5 * (1.0 - q) {
                        -1.0
                    } else {
                        1.0
                    }
                })
                .collect(),
            PriorSpec::GridDensity(g) => {
                let table = g.sampling_table(4096);
                (0..m)
                    .map(|_| {
                        let u: f64 = rng.random();
                        table.invert(u)
                    })
                    .collect()
            }
        }
    }
}

/// Piecewise-linear inverse-CDF table for grid densities.
struct CdfTable {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl CdfTable {
    fn invert(&self, u: f64) -> f64 {
        let pos = self.cdf.partition_point(|&c| c < u);
        if pos == 0 {
            return self.xs[0];
        }
        if pos >= self.cdf.len() {
            return *self.xs.last().unwrap();
        }
        let (c0, c1) = (self.cdf[pos - 1], self.cdf[pos]);
        let (x0, x1) = (self.xs[pos - 1], self.xs[pos]);
        if c1 > c0 {
            x0 + (x1 - x0) * (u - c0) / (c1 - c0)
        } else {
            x0
        }
    }
}

impl GridDensity {
    fn sampling_table(&self, resolution: usize) -> CdfTable {
        let a = self.half_width;
        let step = 2.0 * a / resolution as f64;
        let shift = self.tilted_log_peak(Tilt::ZERO);
        let mut xs = Vec::with_capacity(resolution + 1);
        let mut cdf = Vec::with_capacity(resolution + 1);
        xs.push(-a);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..resolution {
            let lo = -a + step * i as f64;
            let hi = -a + step * (i + 1) as f64;
            acc += adaptive_gk(
                &|x| (-self.v_at(x) - shift).exp(),
                lo,
                hi,
                1e-9 / resolution as f64,
            );
            xs.push(hi);
            cdf.push(acc);
        }
        let total = *cdf.last().unwrap();
        for c in &mut cdf {
            *c /= total;
        }
        CdfTable { xs, cdf }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn spike_slab(q: f64, delta2: f64) -> PriorSpec {
        PriorSpec::gaussian_spike_slab(q, delta2).unwrap()
    }

    fn gaussian(delta2: f64) -> PriorSpec {
        PriorSpec::gaussian_mean_zero(delta2).unwrap()
    }

    /// Gaussian replica of `N(0, delta2)` as a grid density, for
    /// closed-form-vs-quadrature cross checks.
    fn gaussian_grid(delta2: f64) -> PriorSpec {
        let a = 10.0 * delta2.sqrt();
        let n = 1025;
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let x = -a + 2.0 * a * i as f64 / (n - 1) as f64;
                x * x / (2.0 * delta2)
            })
            .collect();
        PriorSpec::grid_density(a, v).unwrap()
    }

    #[test]
    fn cgf_untilted_is_zero() {
        for prior in [
            gaussian(1.0),
            spike_slab(0.5, 1.0),
            PriorSpec::three_point(0.4).unwrap(),
            gaussian_grid(1.0),
        ] {
            assert_abs_diff_eq!(prior.cgf(Tilt::ZERO).unwrap(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn gaussian_cgf_closed_form() {
        // log E exp(x) under N(0,1) is 1/2.
        let c = gaussian(1.0).cgf(Tilt::new(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(c, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn spike_slab_cgf_example() {
        // log(q + (1-q)/sqrt(2)) at q = 1/2, gamma = (0, 1).
        let c = spike_slab(0.5, 1.0).cgf(Tilt::new(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(c, (0.5f64 + 0.5 / 2f64.sqrt()).ln(), epsilon = 1e-14);
    }

    #[test]
    fn spike_slab_tilted_variance_example() {
        let m = spike_slab(0.5, 1.0)
            .tilted_moments(Tilt::new(0.0, 1.0))
            .unwrap();
        assert_abs_diff_eq!(m.mean, 0.0, epsilon = 1e-15);
        // Slab weight (sqrt(2)-1), slab variance 1/2.
        assert_abs_diff_eq!(m.variance, (2f64.sqrt() - 1.0) * 0.5, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_tilt_mean_variance() {
        let m = gaussian(1.0).tilted_moments(Tilt::new(0.6, 1.0)).unwrap();
        assert_abs_diff_eq!(m.mean, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(m.variance, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_normalizable_tilt_rejected() {
        let err = gaussian(1.0).cgf(Tilt::new(0.0, -1.0)).unwrap_err();
        assert!(matches!(err, PriorError::NonNormalizable { .. }));
        // Bounded kinds accept any gamma2.
        assert!(
            PriorSpec::three_point(0.5)
                .unwrap()
                .cgf(Tilt::new(0.0, -25.0))
                .is_ok()
        );
    }

    #[test]
    fn invert_mean_gaussian_closed_form() {
        let h = gaussian(1.0).invert_mean(0.3, 1.0).unwrap();
        assert_abs_diff_eq!(h, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn invert_mean_round_trip() {
        for prior in [
            spike_slab(0.5, 1.0),
            spike_slab(0.9, 5.0),
            PriorSpec::three_point(0.7).unwrap(),
            gaussian_grid(0.5),
        ] {
            let (lo, hi) = prior.support();
            let span = if lo.is_finite() { hi - lo } else { 6.0 };
            let center = if lo.is_finite() { 0.5 * (lo + hi) } else { 0.0 };
            for d in [0.5, 1.0, 2.0] {
                for k in 1..10 {
                    let u = center + span * (k as f64 / 10.0 - 0.45) * 0.9;
                    let h = prior.invert_mean(u, d).unwrap();
                    let m = prior.tilted_moments(Tilt::new(h, d)).unwrap();
                    assert_abs_diff_eq!(m.mean, u, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn invert_mean_out_of_support() {
        let err = PriorSpec::three_point(0.5).unwrap().invert_mean(1.0, 1.0);
        assert!(matches!(err, Err(PriorError::OutOfSupport { .. })));
    }

    #[test]
    fn symmetry_of_cgf_and_oddness_of_mean() {
        for prior in [
            gaussian(2.0),
            spike_slab(0.3, 0.7),
            PriorSpec::three_point(0.6).unwrap(),
            gaussian_grid(1.0),
        ] {
            for g1 in [0.25, 1.0, 3.0] {
                for g2 in [0.0, 0.8] {
                    let plus = prior.tilted_moments(Tilt::new(g1, g2)).unwrap();
                    let minus = prior.tilted_moments(Tilt::new(-g1, g2)).unwrap();
                    assert_abs_diff_eq!(plus.cgf, minus.cgf, epsilon = 1e-10);
                    assert_abs_diff_eq!(plus.mean, -minus.mean, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn quantile_gaussian_examples() {
        let prior = gaussian(1.0);
        let tilt = Tilt::new(0.0, 1.0);
        assert_abs_diff_eq!(
            prior.tilted_quantile(tilt, 0.5).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            prior.tilted_quantile(tilt, 0.975).unwrap(),
            1.959_963_984_540_054 * 0.5f64.sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn quantile_atom_jump() {
        // CDF jump at 0 spans [0.2071, 0.7929]; the median sits inside it.
        let prior = spike_slab(0.5, 1.0);
        let tilt = Tilt::new(0.0, 1.0);
        assert_eq!(prior.tilted_quantile(tilt, 0.5).unwrap(), 0.0);
        assert_eq!(prior.tilted_quantile(tilt, 0.21).unwrap(), 0.0);
        assert_eq!(prior.tilted_quantile(tilt, 0.79).unwrap(), 0.0);
        assert!(prior.tilted_quantile(tilt, 0.2).unwrap() < 0.0);
        assert!(prior.tilted_quantile(tilt, 0.8).unwrap() > 0.0);
    }

    #[test]
    fn quantile_cdf_consistency() {
        let priors = [
            gaussian(1.0),
            spike_slab(0.5, 1.0),
            PriorSpec::three_point(0.5).unwrap(),
            gaussian_grid(1.0),
        ];
        for prior in &priors {
            for tilt in [Tilt::new(0.0, 1.0), Tilt::new(0.7, 0.5)] {
                for k in 1..40 {
                    let t = k as f64 / 40.0;
                    let x = prior.tilted_quantile(tilt, t).unwrap();
                    let cdf = prior.tilted_cdf(tilt, x).unwrap();
                    assert!(cdf >= t - 1e-8, "cdf({x}) = {cdf} < t = {t}");
                    let cdf_left = prior.tilted_cdf(tilt, x - 1e-9 * (1.0 + x.abs())).unwrap();
                    assert!(cdf_left <= t + 1e-6, "cdf left {cdf_left} > {t}");
                }
            }
        }
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let exact = gaussian(1.0);
        let grid = gaussian_grid(1.0);
        for tilt in [
            Tilt::ZERO,
            Tilt::new(1.0, 0.0),
            Tilt::new(0.6, 1.0),
            Tilt::new(-1.5, 2.0),
        ] {
            let a = exact.tilted_moments(tilt).unwrap();
            let b = grid.tilted_moments(tilt).unwrap();
            assert_abs_diff_eq!(a.cgf, b.cgf, epsilon = 1e-8);
            assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-8);
            assert_abs_diff_eq!(a.variance, b.variance, epsilon = 1e-8);
        }
    }

    #[test]
    fn sample_determinism_and_support() {
        let prior = PriorSpec::three_point(0.9).unwrap();
        let a = prior.sample(42, 10);
        let b = prior.sample(42, 10);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
    }

    #[test]
    fn sample_second_moment_lln() {
        let prior = spike_slab(0.5, 1.0);
        let draws = prior.sample(7, 1_000_000);
        let m2 = draws.iter().map(|x| x * x).sum::<f64>() / draws.len() as f64;
        assert_abs_diff_eq!(m2, 0.5, epsilon = 5e-3);
    }

    #[test]
    fn grid_density_sampling_moment() {
        let prior = gaussian_grid(0.25);
        let draws = prior.sample(11, 200_000);
        let m2 = draws.iter().map(|x| x * x).sum::<f64>() / draws.len() as f64;
        assert_relative_eq!(m2, 0.25, max_relative = 0.02);
    }

    #[test]
    fn support_endpoints() {
        assert_eq!(gaussian(1.0).support(), (f64::NEG_INFINITY, f64::INFINITY));
        assert_eq!(PriorSpec::three_point(0.5).unwrap().support(), (-1.0, 1.0));
        let g = PriorSpec::grid_density(2.0, vec![0.0; 200]).unwrap();
        assert_eq!(g.support(), (-2.0, 2.0));
    }

    #[test]
    fn mean_monotone_in_gamma1() {
        for prior in [spike_slab(0.6, 0.4), PriorSpec::three_point(0.5).unwrap()] {
            for g2 in [0.0, 1.0] {
                let mut last = f64::NEG_INFINITY;
                for k in 0..40 {
                    let g1 = -6.0 + 12.0 * k as f64 / 39.0;
                    let mean = prior.tilted_moments(Tilt::new(g1, g2)).unwrap().mean;
                    assert!(mean > last, "tilted mean must increase in gamma1");
                    last = mean;
                }
            }
        }
    }

    #[test]
    fn grid_density_validation() {
        assert!(PriorSpec::grid_density(1.0, vec![0.0; 64]).is_err());
        let mut v = vec![0.0; 200];
        v[3] = 1.0;
        assert!(PriorSpec::grid_density(1.0, v).is_err());
    }
}
