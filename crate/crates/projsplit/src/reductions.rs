//! Executable checks of two single-block boundary cases.
//!
//! At averaging weight zero the one-forward-step map ignores the anchor
//! iterate entirely and its block update is exactly a forward-backward step;
//! the weight is forbidden inside the solver (convergence needs it positive)
//! but the map itself accepts it, precisely so this identity can be tested.
//! Separately, for a single Lipschitz block the combination of the
//! two-forward-step update and the separator projection collapses to a
//! forward-backward-forward step with an adaptive stepsize, computable in
//! closed form. Both equivalences are verified by running the two code paths
//! side by side, not by re-deriving either.

use crate::blocks::{one_forward_step, seed_state_plain, two_forward_step, ForwardOp, Resolvent};
use crate::error::{Error, Result};
use crate::hyperplane::{project_onto_halfspace, BlockPair, Hyperplane};
use crate::solver::{
    solve_observed, BlockScheme, BlockSpec, ProblemSpec, SolveInit, SolveOptions, DEFAULT_PI_TOL,
};
use crate::space::{inner, norm, norm_sq, GammaMetric, LinearMap, PrimalDualPoint, Vector};

/// Runs the one-forward-step block update at averaging weight zero against a
/// deliberately nonzero anchor, alongside an independently written
/// forward-backward step `resolvent(x - stepsize * B x)`. Returns both new
/// points; they must agree exactly, because at weight zero the anchor term
/// vanishes from the update and the remaining arithmetic is identical.
pub fn fb_step_equivalence(
    resolvent: &Resolvent,
    forward: &ForwardOp,
    stepsize: f64,
    x: &Vector,
) -> (Vector, Vector) {
    assert!(stepsize > 0.0, "stepsize must be positive");
    // any anchor must give the same answer; pick one far from x on purpose
    let anchor = x.mapv(|v| 3.0 * v + 1.0);
    let w = Vector::zeros(x.len());
    let state = seed_state_plain(x, stepsize, forward);
    let via_block_update = one_forward_step(&anchor, &state, &w, 0.0, stepsize, resolvent, forward);

    let gradient_step = x - &(forward.eval(x) * stepsize);
    let (direct, _) = resolvent.apply(&gradient_step, stepsize);
    (via_block_update.x, direct)
}

/// Largest distance between the solver trajectory at one averaging weight
/// and the plain forward-backward trajectory, over a fixed horizon.
#[derive(Debug, Clone, Copy)]
pub struct AveragingGap {
    pub averaging: f64,
    pub sup_gap: f64,
}

/// Runs the single-block solver once per averaging weight and plain
/// forward-backward from the same start, reporting each run's largest
/// iterate gap over `iters` iterations. The weights must decrease strictly
/// and lie in (0, 1); the gaps are expected to shrink with the weight, since
/// weight zero would reproduce forward-backward exactly.
pub fn fb_limit_check(
    resolvent: &Resolvent,
    forward: &ForwardOp,
    stepsize: f64,
    z0: &Vector,
    averaging_seq: &[f64],
    iters: usize,
) -> Result<Vec<AveragingGap>> {
    if averaging_seq.is_empty() {
        return Err(Error::config("need at least one averaging weight"));
    }
    if averaging_seq.iter().any(|a| !(a.is_finite() && 0.0 < *a && *a < 1.0)) {
        return Err(Error::config("averaging weights must lie strictly in (0, 1)"));
    }
    if averaging_seq.windows(2).any(|pair| pair[1] >= pair[0]) {
        return Err(Error::config("averaging weights must decrease strictly"));
    }

    let mut fb_path = Vec::with_capacity(iters);
    let mut u = z0.clone();
    for _ in 0..iters {
        let t = &u - &(forward.eval(&u) * stepsize);
        u = resolvent.apply(&t, stepsize).0;
        fb_path.push(u.clone());
    }

    let mut rows = Vec::with_capacity(averaging_seq.len());
    for &averaging in averaging_seq {
        let blocks = vec![BlockSpec {
            resolvent: resolvent.clone(),
            forward: forward.clone(),
            map: LinearMap::identity(z0.len())?,
            scheme: BlockScheme::OneStepFixed {
                averaging,
                stepsize,
            },
            stepsize_link: None,
        }];
        let problem = ProblemSpec::new(blocks, GammaMetric::new(1.0)?);
        let init = SolveInit::from_primal(&problem, z0.clone())?;
        let opts = SolveOptions {
            max_iters: iters,
            residual_tol: 0.0,
            trace_every: 0,
            ..Default::default()
        };
        let mut sup_gap = 0.0f64;
        let mut step = 0usize;
        solve_observed(&problem, &init, &opts, |snapshot| {
            if step < fb_path.len() {
                sup_gap = sup_gap.max(norm(&(&snapshot.projection.next.z - &fb_path[step])));
            }
            step += 1;
        })?;
        rows.push(AveragingGap {
            averaging,
            sup_gap,
        });
    }
    Ok(rows)
}

/// One reduced step computed along both routes.
#[derive(Debug, Clone)]
pub struct TsengStepReport {
    /// Adaptive stepsize `stepsize * (1 + <Bz - Bx, y> / |y|^2)` of the
    /// closed-form update.
    pub rho_tilde: f64,
    /// Next point via the separator projection at unit relaxation.
    pub z_plus_projective: Vector,
    /// Next point via the closed form
    /// `(1 - r/s) z + (r/s) x - r (Bx - Bz)` with `r = rho_tilde`,
    /// `s = stepsize`.
    pub z_plus_tseng_form: Vector,
    /// Measured norm of the difference between the two routes.
    pub discrepancy: f64,
    /// True when the step landed on a zero of `A + B`: the separator
    /// degenerates and the projection reports a certificate instead of
    /// moving, so there is nothing to compare.
    pub terminal: bool,
}

/// Runs one two-forward-step update on a single block (`w = 0`, identity
/// coupling, monotone `B` with `stepsize * L < 1`) and forms the next point
/// both through the separator projection and through the closed-form
/// adaptive-stepsize expression, which are algebraically identical. Spends
/// exactly one resolvent evaluation, asserted via the call counter. The
/// metric weight scales the separator gradient and its norm reciprocally, so
/// the projected point is the same for every weight; it is a parameter only
/// to make that checkable.
pub fn tseng_equivalence_step(
    resolvent: &Resolvent,
    forward: &ForwardOp,
    stepsize: f64,
    gamma: f64,
    z: &Vector,
) -> Result<TsengStepReport> {
    let metric = GammaMetric::new(gamma)?;
    let w = Vector::zeros(z.len());
    let b_at_z = forward.eval(z);

    let calls_before = resolvent.call_count();
    let state = two_forward_step(z, &w, stepsize, resolvent, forward);
    assert_eq!(
        resolvent.call_count() - calls_before,
        1,
        "the reduced step must spend exactly one resolvent evaluation"
    );

    let maps = vec![LinearMap::identity(z.len())?];
    let pairs = [BlockPair {
        x: state.x.clone(),
        y: state.y.clone(),
    }];
    let point = PrimalDualPoint::new(z.clone(), vec![])?;
    let hplane = Hyperplane::build(&pairs, &maps, &metric)?;
    let projection = project_onto_halfspace(&point, &hplane, &metric, 1.0, DEFAULT_PI_TOL)?;

    let y_norm_sq = norm_sq(&state.y);
    if projection.terminal || y_norm_sq == 0.0 {
        return Ok(TsengStepReport {
            rho_tilde: stepsize,
            z_plus_projective: projection.next.z,
            z_plus_tseng_form: z.clone(),
            discrepancy: 0.0,
            terminal: true,
        });
    }

    let rho_tilde =
        stepsize * (1.0 + inner(&(&b_at_z - &state.forward_value), &state.y) / y_norm_sq);
    let ratio = rho_tilde / stepsize;
    let z_plus_tseng_form = &(z * (1.0 - ratio)) + &(&state.x * ratio)
        - &((&state.forward_value - &b_at_z) * rho_tilde);
    let discrepancy = norm(&(&projection.next.z - &z_plus_tseng_form));
    Ok(TsengStepReport {
        rho_tilde,
        z_plus_projective: projection.next.z,
        z_plus_tseng_form,
        discrepancy,
        terminal: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{resolvent_from_prox, GradSpec, ProxSpec};
    use ndarray::arr1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn soft_threshold_resolvent(weight: f64) -> Resolvent {
        resolvent_from_prox(
            &ProxSpec::L1 {
                weight,
                exempt: vec![],
            },
            1,
        )
        .unwrap()
    }

    fn identity_resolvent() -> Resolvent {
        Resolvent::new(|t, _| t.clone())
    }

    #[test]
    fn forward_backward_soft_threshold_example() {
        let resolvent = soft_threshold_resolvent(1.0);
        let forward = ForwardOp::new(1.0, |x: &Vector| x.clone()).unwrap();
        let (via_map, direct) = fb_step_equivalence(&resolvent, &forward, 0.5, &arr1(&[3.0]));
        assert_eq!(via_map, direct);
        assert_eq!(direct, arr1(&[1.0]));
    }

    #[test]
    fn zero_operators_leave_the_point_alone() {
        let resolvent = identity_resolvent();
        let forward = ForwardOp::zero(3);
        let x = arr1(&[1.0, -2.0, 0.5]);
        let (via_map, direct) = fb_step_equivalence(&resolvent, &forward, 0.7, &x);
        assert_eq!(via_map, x);
        assert_eq!(direct, x);
    }

    #[test]
    fn random_scalar_steps_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let weight = rng.random_range(0.1..2.0);
            let slope = rng.random_range(0.0..2.0);
            let stepsize = rng.random_range(0.05..1.5);
            let x = arr1(&[rng.random_range(-5.0..5.0)]);
            let resolvent = soft_threshold_resolvent(weight);
            let forward = ForwardOp::new(slope, move |v: &Vector| v * slope).unwrap();
            let (via_map, direct) = fb_step_equivalence(&resolvent, &forward, stepsize, &x);
            assert_eq!(via_map, direct);
        }
    }

    #[test]
    fn one_dimensional_trajectories_collapse_onto_forward_backward() {
        // min |z| + (z - 3)^2 / 2 from z = 0. In one dimension the separator
        // projection maps z exactly onto the new block point, so the solver
        // reproduces forward-backward at every averaging weight, not just in
        // the limit: all gaps sit at machine noise.
        let resolvent = soft_threshold_resolvent(1.0);
        let forward = GradSpec::LeastSquares {
            design: ndarray::arr2(&[[1.0]]),
            target: vec![3.0],
            scale: 1.0,
        }
        .forward_op()
        .unwrap();
        let rows = fb_limit_check(
            &resolvent,
            &forward,
            0.9,
            &Vector::zeros(1),
            &[0.5, 0.1, 0.01, 0.001],
            50,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            assert!(
                row.sup_gap < 1e-12,
                "weight {} gap {} should be machine noise",
                row.averaging,
                row.sup_gap
            );
        }
    }

    fn three_dim_lasso() -> (Resolvent, ForwardOp, f64) {
        let resolvent = resolvent_from_prox(
            &ProxSpec::L1 {
                weight: 1.0,
                exempt: vec![],
            },
            3,
        )
        .unwrap();
        let grad = GradSpec::LeastSquares {
            design: ndarray::arr2(&[
                [1.0, 0.2, 0.0],
                [0.0, 0.9, 0.3],
                [0.1, 0.0, 1.1],
            ]),
            target: vec![3.0, -1.0, 2.0],
            scale: 1.0,
        };
        let stepsize = 0.9 / grad.lipschitz();
        (resolvent, grad.forward_op().unwrap(), stepsize)
    }

    #[test]
    fn trajectory_gap_shrinks_with_the_averaging_weight() {
        // with more than one coordinate the projection moves z along the
        // separator gradient instead of onto the block point, so the
        // trajectory genuinely depends on the weight and approaches
        // forward-backward only as the weight shrinks
        let (resolvent, forward, stepsize) = three_dim_lasso();
        let rows = fb_limit_check(
            &resolvent,
            &forward,
            stepsize,
            &Vector::zeros(3),
            &[0.5, 0.1, 0.01, 0.001],
            50,
        )
        .unwrap();
        for pair in rows.windows(2) {
            assert!(
                pair[1].sup_gap < pair[0].sup_gap,
                "gap must shrink: {} at {} vs {} at {}",
                pair[0].sup_gap,
                pair[0].averaging,
                pair[1].sup_gap,
                pair[1].averaging
            );
        }
        assert!(
            rows[3].sup_gap < 0.05,
            "weight 0.001 gap was {}",
            rows[3].sup_gap
        );
    }

    #[test]
    fn limit_check_rejects_bad_weight_sequences() {
        let resolvent = identity_resolvent();
        let forward = ForwardOp::zero(1);
        let z0 = Vector::zeros(1);
        assert!(fb_limit_check(&resolvent, &forward, 0.5, &z0, &[], 5).is_err());
        assert!(fb_limit_check(&resolvent, &forward, 0.5, &z0, &[0.1, 0.5], 5).is_err());
        assert!(fb_limit_check(&resolvent, &forward, 0.5, &z0, &[0.5, 0.0], 5).is_err());
    }

    #[test]
    fn hand_worked_adaptive_step() {
        // A = subdifferential of |.|, B = identity, stepsize 1/2, z = 1:
        // x = soft(1/2, 1/2) = 0, y = 1, adaptive stepsize 1, both routes 0
        let resolvent = soft_threshold_resolvent(1.0);
        let forward = ForwardOp::new(1.0, |v: &Vector| v.clone()).unwrap();
        let report =
            tseng_equivalence_step(&resolvent, &forward, 0.5, 1.0, &arr1(&[1.0])).unwrap();
        assert!(!report.terminal);
        assert!((report.rho_tilde - 1.0).abs() < 1e-14);
        assert!(report.z_plus_projective[0].abs() < 1e-14);
        assert!(report.z_plus_tseng_form[0].abs() < 1e-14);
        assert!(report.discrepancy < 1e-14);
    }

    #[test]
    fn constant_forward_map_keeps_the_stepsize() {
        let resolvent = soft_threshold_resolvent(0.4);
        let shift = arr1(&[0.3, -0.2]);
        let forward = {
            let shift = shift.clone();
            ForwardOp::new(0.0, move |_: &Vector| shift.clone()).unwrap()
        };
        let z = arr1(&[2.0, -1.5]);
        let report = tseng_equivalence_step(&resolvent, &forward, 0.8, 1.0, &z).unwrap();
        assert!(!report.terminal);
        // Bz = Bx, so the correction term vanishes and z+ = x exactly
        assert!((report.rho_tilde - 0.8).abs() < 1e-14);
        assert!(report.discrepancy < 1e-12);
    }

    #[test]
    fn zero_of_the_sum_is_flagged_terminal() {
        let resolvent = identity_resolvent();
        let forward = ForwardOp::zero(2);
        let z = arr1(&[0.7, -0.1]);
        let report = tseng_equivalence_step(&resolvent, &forward, 0.5, 1.0, &z).unwrap();
        assert!(report.terminal);
        assert_eq!(report.discrepancy, 0.0);
        assert_eq!(report.z_plus_projective, z);
    }

    #[test]
    fn random_instances_agree_to_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let dim = 1 + trial % 4;
            let weight = rng.random_range(0.05..1.5);
            let resolvent = resolvent_from_prox(
                &ProxSpec::L1 {
                    weight,
                    exempt: vec![],
                },
                dim,
            )
            .unwrap();
            // monotone linear B from a PSD matrix
            let root = ndarray::Array2::from_shape_fn((dim, dim), |_| rng.random_range(-1.0..1.0));
            let q = root.dot(&root.t());
            let grad = GradSpec::Quadratic { matrix: q };
            let lipschitz = grad.lipschitz().max(1e-6);
            let forward = grad.forward_op().unwrap();
            let stepsize = 0.9 / lipschitz;
            let gamma = [0.5, 1.0, 2.0][trial % 3];
            let z = Vector::from_shape_fn(dim, |_| rng.random_range(-3.0..3.0));
            let report =
                tseng_equivalence_step(&resolvent, &forward, stepsize, gamma, &z).unwrap();
            if report.terminal {
                continue;
            }
            assert!(
                report.discrepancy < 1e-10,
                "trial {trial}: discrepancy {}",
                report.discrepancy
            );
        }
    }

    #[test]
    fn projected_point_is_metric_independent() {
        let resolvent = soft_threshold_resolvent(0.6);
        let forward = ForwardOp::new(1.0, |v: &Vector| v.clone()).unwrap();
        let z = arr1(&[1.7, -0.4, 2.2]);
        let heavy = tseng_equivalence_step(&resolvent, &forward, 0.5, 8.0, &z).unwrap();
        let light = tseng_equivalence_step(&resolvent, &forward, 0.5, 0.125, &z).unwrap();
        let gap = norm(&(&heavy.z_plus_projective - &light.z_plus_projective));
        assert!(gap < 1e-12, "gamma leaked into the projection: {gap}");
    }
}
