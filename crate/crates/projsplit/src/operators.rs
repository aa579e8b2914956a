//! Proximal maps, gradient maps, and the plumbing that turns them into
//! block operators.
//!
//! Everything here is a concrete operator used by the experiment problems:
//! soft thresholding, group shrinkage, simplex and halfspace projections on
//! the proximal side; quadratic, logistic, and affine least-squares gradients
//! on the forward side. Gradient constructors compute their smoothness
//! constant with a power iteration instead of trusting the caller.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ForwardOp, Resolvent};
use crate::error::{Error, Result};
use crate::space::{inner, norm, norm_sq, Vector};

/// Soft threshold, the proximal map of `threshold * |.|_1`.
pub fn prox_l1(t: &Vector, threshold: f64) -> Vector {
    debug_assert!(threshold >= 0.0);
    t.mapv(|v| v.signum() * (v.abs() - threshold).max(0.0))
}

/// Blockwise shrinkage, the proximal map of `threshold * sum_g |x_g|_2` for
/// disjoint groups. Coordinates in no group pass through unchanged. A group
/// whose norm does not exceed the threshold collapses to zero, which also
/// covers the zero-norm case without dividing by it.
pub fn prox_group_l2(t: &Vector, threshold: f64, groups: &[Vec<usize>]) -> Vector {
    debug_assert!(threshold >= 0.0);
    let mut out = t.clone();
    for group in groups {
        let group_norm_sq: f64 = group.iter().map(|&i| t[i] * t[i]).sum();
        let group_norm = group_norm_sq.sqrt();
        if group_norm <= threshold {
            for &i in group {
                out[i] = 0.0;
            }
        } else {
            let factor = 1.0 - threshold / group_norm;
            for &i in group {
                out[i] = t[i] * factor;
            }
        }
    }
    out
}

/// Euclidean projection onto the probability simplex, by the sort-and-shift
/// rule.
pub fn project_simplex(t: &Vector) -> Vector {
    let mut sorted: Vec<f64> = t.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut shift = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v - candidate > 0.0 {
            shift = candidate;
        } else {
            break;
        }
    }
    t.mapv(|v| (v - shift).max(0.0))
}

/// Euclidean projection onto the halfspace `{x : <normal, x> >= offset}`.
pub fn project_halfspace(t: &Vector, normal: &Vector, offset: f64) -> Vector {
    let violation = offset - inner(normal, t);
    if violation <= 0.0 {
        t.clone()
    } else {
        t + &(normal * (violation / norm_sq(normal)))
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite operator given
/// through matrix-vector products. Deterministic seeded start.
pub fn power_iteration(
    apply: impl Fn(&Vector) -> Vector,
    dim: usize,
    max_iters: usize,
    tol: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let mut v = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0f64));
    let n = norm(&v);
    if n == 0.0 {
        return 0.0;
    }
    v /= n;
    let mut eig = 0.0;
    for _ in 0..max_iters {
        let av = apply(&v);
        let next_eig = inner(&v, &av);
        let av_norm = norm(&av);
        if av_norm == 0.0 {
            return 0.0;
        }
        let done = (next_eig - eig).abs() <= tol * next_eig.abs().max(1.0);
        eig = next_eig;
        v = av / av_norm;
        if done {
            break;
        }
    }
    eig
}

/// Description of a proximable function, turned into a block's resolvent by
/// [`resolvent_from_prox`].
#[derive(Debug, Clone)]
pub enum ProxSpec {
    /// The zero function; its resolvent is the identity.
    Zero,
    /// `weight * |x|_1`, skipping the coordinates listed in `exempt`.
    L1 { weight: f64, exempt: Vec<usize> },
    /// `weight * sum_g |x_g|_2` over disjoint index groups.
    GroupL2 {
        weight: f64,
        groups: Vec<Vec<usize>>,
    },
    /// Indicator of the probability simplex.
    Simplex,
    /// Indicator of `{x : <normal, x> >= offset}`.
    Halfspace { normal: Vec<f64>, offset: f64 },
    /// `f(x - shift)` for an inner proximable `f`.
    Translated { inner: Box<ProxSpec>, shift: Vec<f64> },
}

impl ProxSpec {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ProxSpec::Zero | ProxSpec::Simplex => Ok(()),
            ProxSpec::L1 { weight, exempt } => {
                if !(weight.is_finite() && *weight >= 0.0) {
                    return Err(Error::config(format!("l1 weight must be >= 0, got {weight}")));
                }
                if let Some(&bad) = exempt.iter().find(|&&i| i >= dim) {
                    return Err(Error::config(format!(
                        "l1 exempt index {bad} out of range for dim {dim}"
                    )));
                }
                Ok(())
            }
            ProxSpec::GroupL2 { weight, groups } => {
                if !(weight.is_finite() && *weight >= 0.0) {
                    return Err(Error::config(format!(
                        "group weight must be >= 0, got {weight}"
                    )));
                }
                let mut seen = vec![false; dim];
                for group in groups {
                    for &i in group {
                        if i >= dim {
                            return Err(Error::config(format!(
                                "group index {i} out of range for dim {dim}"
                            )));
                        }
                        if seen[i] {
                            return Err(Error::config(format!(
                                "coordinate {i} appears in more than one group"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                Ok(())
            }
            ProxSpec::Halfspace { normal, offset } => {
                if normal.len() != dim {
                    return Err(Error::ShapeMismatch {
                        context: "halfspace normal",
                        expected: dim,
                        got: normal.len(),
                    });
                }
                if !normal.iter().all(|v| v.is_finite()) || !offset.is_finite() {
                    return Err(Error::NonFinite {
                        context: "halfspace parameters",
                        iter: 0,
                    });
                }
                if normal.iter().all(|&v| v == 0.0) {
                    return Err(Error::config("halfspace normal must be nonzero"));
                }
                Ok(())
            }
            ProxSpec::Translated { inner, shift } => {
                if shift.len() != dim {
                    return Err(Error::ShapeMismatch {
                        context: "translation shift",
                        expected: dim,
                        got: shift.len(),
                    });
                }
                inner.validate(dim)
            }
        }
    }

    fn closure(&self, dim: usize) -> Box<dyn Fn(&Vector, f64) -> Vector + Send + Sync> {
        match self {
            ProxSpec::Zero => Box::new(|t, _| t.clone()),
            ProxSpec::L1 { weight, exempt } => {
                let weight = *weight;
                let exempt = exempt.clone();
                Box::new(move |t, stepsize| {
                    let mut out = prox_l1(t, stepsize * weight);
                    for &i in &exempt {
                        out[i] = t[i];
                    }
                    out
                })
            }
            ProxSpec::GroupL2 { weight, groups } => {
                let weight = *weight;
                let groups = groups.clone();
                Box::new(move |t, stepsize| prox_group_l2(t, stepsize * weight, &groups))
            }
            ProxSpec::Simplex => Box::new(|t, _| project_simplex(t)),
            ProxSpec::Halfspace { normal, offset } => {
                let normal = Array1::from_vec(normal.clone());
                let offset = *offset;
                Box::new(move |t, _| project_halfspace(t, &normal, offset))
            }
            ProxSpec::Translated { inner, shift } => {
                let inner = inner.closure(dim);
                let shift = Array1::from_vec(shift.clone());
                Box::new(move |t, stepsize| &inner(&(t - &shift), stepsize) + &shift)
            }
        }
    }
}

/// Builds a counting resolvent for a proximable function on a `dim`-sized
/// block. The returned operator satisfies the resolvent identity
/// `x + stepsize * a = t` by construction.
pub fn resolvent_from_prox(spec: &ProxSpec, dim: usize) -> Result<Resolvent> {
    spec.validate(dim)?;
    Ok(Resolvent::new(spec.closure(dim)))
}

fn clamp_exponent(m: f64) -> f64 {
    m.clamp(-30.0, 30.0)
}

/// Logistic loss `sum_i log(1 + exp(-labels_i * (intercept + <data_i, x>)))`.
pub fn logistic_loss(intercept: f64, x: &Vector, data: &Array2<f64>, labels: &Vector) -> f64 {
    let margins = data.dot(x) + intercept;
    margins
        .iter()
        .zip(labels)
        .map(|(&m, &label)| {
            let v = label * m;
            // log(1 + exp(-v)) without overflow for large |v|
            if v >= 0.0 {
                (-v).exp().ln_1p()
            } else {
                -v + v.exp().ln_1p()
            }
        })
        .sum()
}

/// Gradient of [`logistic_loss`] in `(intercept, x)`.
pub fn grad_logistic(
    intercept: f64,
    x: &Vector,
    data: &Array2<f64>,
    labels: &Vector,
) -> (f64, Vector) {
    let margins = data.dot(x) + intercept;
    // d/dv log(1 + exp(-v)) = -1 / (1 + exp(v))
    let coeffs = Array1::from_iter(
        margins
            .iter()
            .zip(labels)
            .map(|(&m, &label)| -label / (1.0 + clamp_exponent(label * m).exp())),
    );
    let grad_x = data.t().dot(&coeffs);
    (coeffs.sum(), grad_x)
}

/// Description of a smooth block part, turned into a [`ForwardOp`] with a
/// computed smoothness constant by [`GradSpec::forward_op`].
#[derive(Debug, Clone)]
pub enum GradSpec {
    Zero { dim: usize },
    /// Gradient `2 Q x` of the quadratic form `x^T Q x`, `Q` symmetric PSD.
    Quadratic { matrix: Array2<f64> },
    /// Gradient of the logistic loss over the packed variable
    /// `[intercept, coefficients]`.
    Logistic {
        data: Array2<f64>,
        labels: Vec<f64>,
    },
    /// Gradient of `scale / 2 * |design x - target|^2`.
    LeastSquares {
        design: Array2<f64>,
        target: Vec<f64>,
        scale: f64,
    },
}

const POWER_ITERS: usize = 100;
const POWER_TOL: f64 = 1e-8;

impl GradSpec {
    /// Smoothness (Lipschitz) constant of the gradient. Exact up to the power
    /// iteration tolerance for every kind.
    pub fn lipschitz(&self) -> f64 {
        match self {
            GradSpec::Zero { .. } => 0.0,
            GradSpec::Quadratic { matrix } => {
                2.0 * power_iteration(|v| matrix.dot(v), matrix.ncols(), POWER_ITERS, POWER_TOL)
            }
            GradSpec::Logistic { data, .. } => {
                // Hessian is bounded by (1/4) M^T M for the design with an
                // all-ones intercept column.
                let top = power_iteration(
                    |v| {
                        let (head, tail) = split_packed(v);
                        let fitted = data.dot(&tail) + head;
                        let mut out = Array1::zeros(v.len());
                        out[0] = fitted.sum();
                        out.slice_mut(ndarray::s![1..]).assign(&data.t().dot(&fitted));
                        out
                    },
                    data.ncols() + 1,
                    POWER_ITERS,
                    POWER_TOL,
                );
                0.25 * top
            }
            GradSpec::LeastSquares { design, scale, .. } => {
                scale
                    * power_iteration(
                        |v| design.t().dot(&design.dot(v)),
                        design.ncols(),
                        POWER_ITERS,
                        POWER_TOL,
                    )
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GradSpec::Zero { dim } => *dim,
            GradSpec::Quadratic { matrix } => matrix.ncols(),
            GradSpec::Logistic { data, .. } => data.ncols() + 1,
            GradSpec::LeastSquares { design, .. } => design.ncols(),
        }
    }

    pub fn forward_op(&self) -> Result<ForwardOp> {
        match self {
            GradSpec::Zero { dim } => Ok(ForwardOp::zero(*dim)),
            GradSpec::Quadratic { matrix } => {
                if matrix.nrows() != matrix.ncols() {
                    return Err(Error::ShapeMismatch {
                        context: "quadratic matrix",
                        expected: matrix.nrows(),
                        got: matrix.ncols(),
                    });
                }
                let lipschitz = self.lipschitz();
                let q = matrix.clone();
                ForwardOp::new(lipschitz, move |x: &Vector| q.dot(x) * 2.0)
            }
            GradSpec::Logistic { data, labels } => {
                if data.nrows() != labels.len() {
                    return Err(Error::ShapeMismatch {
                        context: "logistic labels",
                        expected: data.nrows(),
                        got: labels.len(),
                    });
                }
                let lipschitz = self.lipschitz();
                let data = data.clone();
                let labels = Array1::from_vec(labels.clone());
                ForwardOp::new(lipschitz, move |v: &Vector| {
                    let (head, tail) = split_packed(v);
                    let (g0, gx) = grad_logistic(head, &tail, &data, &labels);
                    pack(g0, &gx)
                })
            }
            GradSpec::LeastSquares {
                design,
                target,
                scale,
            } => {
                if design.nrows() != target.len() {
                    return Err(Error::ShapeMismatch {
                        context: "least-squares target",
                        expected: design.nrows(),
                        got: target.len(),
                    });
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::config(format!(
                        "least-squares scale must be positive, got {scale}"
                    )));
                }
                let lipschitz = self.lipschitz();
                let design = design.clone();
                let target = Array1::from_vec(target.clone());
                let scale = *scale;
                ForwardOp::new(lipschitz, move |x: &Vector| {
                    let residual = design.dot(x) - &target;
                    design.t().dot(&residual) * scale
                })
            }
        }
    }
}

/// Splits a packed `[intercept, coefficients]` variable.
pub fn split_packed(v: &Vector) -> (f64, Vector) {
    (v[0], v.slice(ndarray::s![1..]).to_owned())
}

/// Packs an intercept and coefficient vector into one variable.
pub fn pack(head: f64, tail: &Vector) -> Vector {
    let mut out = Array1::zeros(tail.len() + 1);
    out[0] = head;
    out.slice_mut(ndarray::s![1..]).assign(tail);
    out
}
