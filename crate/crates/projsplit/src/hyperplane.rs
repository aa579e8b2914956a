//! Separating hyperplane construction and the relaxed projection step.
//!
//! After every block has produced a pair `(x_i, y_i)` with `y_i in T_i x_i`,
//! the affine function
//!
//! ```text
//! phi(z, w) = sum_i <G_i z - x_i, y_i - w_i>
//! ```
//!
//! is nonpositive on the solution set, and strictly positive at the current
//! iterate unless that iterate already solves the problem. Moving the iterate
//! to (or past) the zero set of `phi` is a halfspace projection in the
//! weighted metric, which is what [`project_onto_halfspace`] performs.
//!
//! `phi` is evaluated through a rearranged form whose coefficients are
//! assembled once from the block pairs, so evaluating at a new point costs
//! only inner products. The per-block sum above stays available through
//! [`block_gap`] and [`separator_value_direct`] and the two forms are checked
//! against each other in tests.

use crate::error::{Error, Result};
use crate::space::{
    gamma_dist_sq, inner, norm_sq, GammaMetric, LinearMap, PrimalDualPoint, Vector,
};

/// Output pair `(x_i, y_i)` of one block update, with `y_i in T_i x_i`.
#[derive(Debug, Clone)]
pub struct BlockPair {
    pub x: Vector,
    pub y: Vector,
}

/// Coefficients of the separating affine function for one iteration:
///
/// ```text
/// phi(z, w) = <z, primal_coeff> + sum_{i<n} <w_i, dual_coeff[i]> + offset
/// ```
///
/// `grad_norm_sq` is the squared norm of the gradient of `phi` in the
/// weighted metric; it is zero exactly when the block pairs already assemble
/// into a solution, in which case `certificate` is that solution.
#[derive(Debug, Clone)]
pub struct Hyperplane {
    /// Coefficient on `z`: `sum_i G_i^* y_i` over all n blocks.
    pub primal_coeff: Vector,
    /// Coefficient on `w_i`: `x_i - G_i x_n`, for each of the first n-1 blocks.
    pub dual_coeff: Vec<Vector>,
    /// Constant term `-sum_i <x_i, y_i>`.
    pub offset: f64,
    /// `|dual_coeff|^2 + gamma^{-1} |primal_coeff|^2`.
    pub grad_norm_sq: f64,
    /// The tuple `(x_n, y_1, ..., y_{n-1})`, a solution when `grad_norm_sq = 0`.
    pub certificate: PrimalDualPoint,
}

/// Result of projecting an iterate onto the halfspace `phi <= 0`.
#[derive(Debug, Clone)]
pub struct Projection {
    /// True when the hyperplane degenerated (`grad_norm_sq <= pi_tol`); `next`
    /// is then the solution certificate rather than a projected iterate.
    pub terminal: bool,
    pub next: PrimalDualPoint,
    pub grad_norm_sq: f64,
    /// Multiplier applied to the gradient; zero when `phi(p) <= 0`.
    pub step: f64,
    /// Value of the separator at the input point.
    pub phi_value: f64,
}

fn check_block_shapes(pairs: &[BlockPair], maps: &[LinearMap]) -> Result<()> {
    if pairs.is_empty() || pairs.len() != maps.len() {
        return Err(Error::ShapeMismatch {
            context: "block pairs vs coupling maps",
            expected: maps.len(),
            got: pairs.len(),
        });
    }
    for (pair, map) in pairs.iter().zip(maps) {
        if pair.x.len() != map.output_dim() || pair.y.len() != map.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "block pair vs coupling map output",
                expected: map.output_dim(),
                got: pair.x.len(),
            });
        }
    }
    if !maps[maps.len() - 1].is_identity() {
        return Err(Error::config("the last block's coupling map must be the identity"));
    }
    Ok(())
}

impl Hyperplane {
    /// Assembles the separator coefficients from this iteration's block pairs.
    pub fn build(pairs: &[BlockPair], maps: &[LinearMap], metric: &GammaMetric) -> Result<Self> {
        check_block_shapes(pairs, maps)?;
        let n = pairs.len();
        let x_last = &pairs[n - 1].x;

        let mut primal_coeff = pairs[n - 1].y.clone();
        for (pair, map) in pairs[..n - 1].iter().zip(maps) {
            primal_coeff += &map.apply_adjoint(&pair.y);
        }

        let mut dual_coeff = Vec::with_capacity(n - 1);
        let mut grad_norm_sq = norm_sq(&primal_coeff) / metric.gamma();
        for (pair, map) in pairs[..n - 1].iter().zip(maps) {
            let coeff = &pair.x - &map.apply(x_last);
            grad_norm_sq += norm_sq(&coeff);
            dual_coeff.push(coeff);
        }

        let offset = -pairs.iter().map(|pair| inner(&pair.x, &pair.y)).sum::<f64>();

        let certificate = PrimalDualPoint {
            z: x_last.clone(),
            w: pairs[..n - 1].iter().map(|pair| pair.y.clone()).collect(),
        };

        Ok(Hyperplane {
            primal_coeff,
            dual_coeff,
            offset,
            grad_norm_sq,
            certificate,
        })
    }

    /// Evaluates the separator at an arbitrary primal-dual point.
    pub fn phi_at(&self, p: &PrimalDualPoint) -> f64 {
        debug_assert_eq!(p.w.len(), self.dual_coeff.len());
        let mut value = self.offset + inner(&p.z, &self.primal_coeff);
        for (wi, coeff) in p.w.iter().zip(&self.dual_coeff) {
            value += inner(wi, coeff);
        }
        value
    }

    /// Gradient of the separator with respect to the weighted inner product,
    /// as a primal-dual point.
    pub fn gradient(&self, metric: &GammaMetric) -> PrimalDualPoint {
        PrimalDualPoint {
            z: &self.primal_coeff / metric.gamma(),
            w: self.dual_coeff.clone(),
        }
    }
}

/// Separator value for one block: `<G z - x, y - w>`.
pub fn block_gap(pair: &BlockPair, map: &LinearMap, z: &Vector, w: &Vector) -> f64 {
    let gap = map.apply(z) - &pair.x;
    let slack = &pair.y - w;
    inner(&gap, &slack)
}

/// Separator value as the explicit sum of per-block terms, with the last
/// block's dual variable derived from the others. Slower than going through
/// [`Hyperplane::phi_at`]; kept as an independent cross-check.
pub fn separator_value_direct(
    pairs: &[BlockPair],
    maps: &[LinearMap],
    p: &PrimalDualPoint,
) -> Result<f64> {
    check_block_shapes(pairs, maps)?;
    let n = pairs.len();
    if p.w.len() + 1 != n {
        return Err(Error::ShapeMismatch {
            context: "point duals vs blocks",
            expected: n - 1,
            got: p.w.len(),
        });
    }
    let w_last = p.last_dual(maps);
    let mut total = block_gap(&pairs[n - 1], &maps[n - 1], &p.z, &w_last);
    for i in 0..n - 1 {
        total += block_gap(&pairs[i], &maps[i], &p.z, &p.w[i]);
    }
    Ok(total)
}

/// Projects `p` onto the halfspace `{phi <= 0}` in the weighted metric, with
/// over/under-relaxation `relaxation` in (0, 2).
///
/// When the gradient norm falls at or below `pi_tol` the hyperplane carries no
/// direction to move along; the block pairs then already form a solution and
/// the returned outcome is flagged terminal with that solution as `next`.
pub fn project_onto_halfspace(
    p: &PrimalDualPoint,
    hplane: &Hyperplane,
    metric: &GammaMetric,
    relaxation: f64,
    pi_tol: f64,
) -> Result<Projection> {
    if !(relaxation.is_finite() && relaxation > 0.0 && relaxation < 2.0) {
        return Err(Error::config(format!(
            "projection relaxation must lie strictly between 0 and 2, got {relaxation}"
        )));
    }
    if !(pi_tol.is_finite() && pi_tol >= 0.0) {
        return Err(Error::config(format!(
            "pi_tol must be finite and nonnegative, got {pi_tol}"
        )));
    }
    if p.w.len() != hplane.dual_coeff.len() {
        return Err(Error::ShapeMismatch {
            context: "point duals vs hyperplane coefficients",
            expected: hplane.dual_coeff.len(),
            got: p.w.len(),
        });
    }

    let phi_value = hplane.phi_at(p);
    let pi = hplane.grad_norm_sq;

    if pi <= pi_tol {
        return Ok(Projection {
            terminal: true,
            next: hplane.certificate.clone(),
            grad_norm_sq: pi,
            step: 0.0,
            phi_value,
        });
    }

    let step = relaxation * phi_value.max(0.0) / pi;
    let z = &p.z - &(&hplane.primal_coeff * (step / metric.gamma()));
    let w = p
        .w
        .iter()
        .zip(&hplane.dual_coeff)
        .map(|(wi, coeff)| wi - &(coeff * step))
        .collect();

    Ok(Projection {
        terminal: false,
        next: PrimalDualPoint { z, w },
        grad_norm_sq: pi,
        step,
        phi_value,
    })
}

/// One-sided Fejer check: the projected point is no farther from `q` than `p`
/// was, for any `q` in the halfspace. Returns the (signed) increase.
pub fn fejer_gap(
    p: &PrimalDualPoint,
    projected: &PrimalDualPoint,
    q: &PrimalDualPoint,
    metric: &GammaMetric,
) -> f64 {
    gamma_dist_sq(projected, q, metric) - gamma_dist_sq(p, q, metric)
}
