//! Sharp asymptotics for naive mean-field (NMF) variational inference in
//! high-dimensional linear regression, with a matching simulation harness.
//!
//! The pipeline has two halves:
//!
//! * **Scalar theory** — [`priors`] supplies exponential-tilt analytics,
//!   [`meanfield`] builds the per-coordinate penalty `G`/`F` and certifies
//!   its strong convexity, [`prox`] evaluates the scalar denoiser
//!   `η(x, t) = prox_{tF}(x)`, [`channel`] integrates over the effective
//!   scalar channel `(B, Z) ~ π* ⊗ N(0,1)`, [`fixedpoint`] solves the
//!   two-scalar max-min system for `(b*, τ*)`, and [`predictions`] turns the
//!   solution into limiting MSE, evidence, coverage, and corrected credible
//!   intervals.
//! * **Simulation** — [`simulate`] draws synthetic regression instances,
//!   minimizes the NMF objective by gradient descent, and measures the same
//!   quantities empirically (plus a sliced Wasserstein-2 comparison with the
//!   predicted limit law and an exact Gaussian-prior evidence oracle).
//!
//! Data-parallel inner loops (quadrature nodes, solver restarts, replicates,
//! random projections) run on rayon when the default `parallel` feature is
//! enabled and fall back to plain iterators without it; either way results
//! are reduced in fixed order, so outputs are bit-identical across lanes and
//! thread counts.

// Negated comparisons like `!(t > 0.0)` are deliberate: they reject NaN
// along with the out-of-range sign, which `t <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod fixedpoint;
pub mod meanfield;
pub mod numerics;
pub mod par;
pub mod predictions;
pub mod priors;
pub mod prox;
pub mod simulate;

pub use channel::{ChannelLaw, QuadratureScheme, SlabStrategy};
pub use fixedpoint::{FixedPoint, FixedPointSolution, SolveOptions, VerifyReport};
pub use meanfield::{Certificate, ConvexityReport, ProblemSpec};
pub use predictions::Predictions;
pub use priors::{PriorSpec, Tilt, TiltedMoments};
pub use prox::Denoiser;
pub use simulate::{Dataset, DesignKind, SimConfig, SimResult};
