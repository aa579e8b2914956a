//! Projective splitting for monotone inclusions split across `n` blocks.
//!
//! The problem solved is: find `z` with `0 in sum_i G_i^* T_i(G_i z)` where
//! each block operator `T_i = A_i + B_i` pairs a maximal monotone part `A_i`
//! (accessed through its resolvent) with a cocoercive or Lipschitz part `B_i`
//! (accessed through forward evaluations). Each iteration updates every block
//! to produce a separating affine function and then projects the current
//! primal-dual iterate onto the halfspace where that function is nonpositive.
//!
//! The distinguishing feature of the block update here is that it needs only
//! one new forward evaluation per iteration for cocoercive `B_i`, two for
//! merely Lipschitz `B_i`, and it can discover usable stepsizes by
//! backtracking when no smoothness constant is available.
//!
//! ```
//! use ndarray::arr1;
//! use projsplit::{problems, solver};
//!
//! // min_x |x| + 0.5 (x - 3)^2 has the unique solution x = 2.
//! let (spec, init) = problems::scalar_lasso();
//! let opts = solver::SolveOptions::default();
//! let result = solver::solve(&spec, &init, &opts).unwrap();
//! let z = &result.point.z;
//! assert!((z[0] - 2.0).abs() < 1e-6);
//! # assert!(result.status != solver::SolveStatus::MaxIters);
//! let _ = arr1(&[z[0]]);
//! ```

pub mod blocks;
pub mod error;
pub mod hyperplane;
pub mod operators;
pub mod problems;
pub mod reductions;
pub mod solver;
pub mod space;

pub use error::{Error, Result};
pub use space::{
    gamma_dist_sq, gamma_inner, gamma_norm_sq, CsrMatrix, GammaMetric, LinearMap, PrimalDualPoint,
    Vector,
};
