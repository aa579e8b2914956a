//! The outer solve loop: block updates, separator assembly, projection.
//!
//! Each iteration walks every block once (in index order, though the updates
//! only read the shared iterate, so order does not affect the result), builds
//! the separating hyperplane from the fresh block pairs, and projects the
//! primal-dual iterate onto its nonpositive side. The loop stops when the
//! per-block residuals drop below tolerance, when the hyperplane degenerates
//! (which certifies an exact solution), or at the iteration cap.

use std::time::Instant;

use crate::blocks::{
    backtrack, one_forward_step, seed_state, seed_state_plain, seed_state_with_pair,
    two_forward_step, BacktrackConfig, BlockState, ForwardOp, Resolvent,
};
use crate::error::{Error, Result};
use crate::hyperplane::{project_onto_halfspace, BlockPair, Hyperplane, Projection};
use crate::space::{ensure_finite, norm, GammaMetric, LinearMap, PrimalDualPoint, Vector};

/// How one block computes its update each iteration.
#[derive(Debug)]
pub enum BlockScheme {
    /// One forward evaluation per iteration at a fixed stepsize, valid when
    /// the forward map's cocoercivity constant is known.
    OneStepFixed { averaging: f64, stepsize: f64 },
    /// One forward evaluation per accepted trial, stepsize discovered by
    /// backtracking; for forward maps without a usable constant.
    OneStepBacktrack(BacktrackConfig),
    /// Two forward evaluations per iteration at a fixed stepsize below the
    /// inverse Lipschitz constant; no cocoercivity needed.
    TwoStepLipschitz { stepsize: f64 },
}

/// One block of the inclusion problem: operators, coupling map, update scheme.
pub struct BlockSpec {
    pub resolvent: Resolvent,
    pub forward: ForwardOp,
    pub map: LinearMap,
    pub scheme: BlockScheme,
    /// When set to `Some(j)`, this block replaces its configured stepsize with
    /// block `j`'s current one every iteration (`j`'s fresh value if `j` comes
    /// earlier in index order). Only meaningful for fixed-stepsize schemes; a
    /// way to let one backtracking block pace the others.
    pub stepsize_link: Option<usize>,
}

impl std::fmt::Debug for BlockSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockSpec")
            .field("map_dims", &(self.map.input_dim(), self.map.output_dim()))
            .field("scheme", &self.scheme)
            .field("stepsize_link", &self.stepsize_link)
            .finish()
    }
}

/// Full problem description handed to [`solve`].
#[derive(Debug)]
pub struct ProblemSpec {
    pub blocks: Vec<BlockSpec>,
    pub metric: GammaMetric,
    /// Projection relaxation in (0, 2); 1 projects exactly onto the
    /// hyperplane, larger values overshoot.
    pub relaxation: f64,
}

impl ProblemSpec {
    pub fn new(blocks: Vec<BlockSpec>, metric: GammaMetric) -> Self {
        ProblemSpec {
            blocks,
            metric,
            relaxation: 1.0,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn primal_dim(&self) -> usize {
        self.blocks[0].map.input_dim()
    }

    fn maps(&self) -> Vec<LinearMap> {
        self.blocks.iter().map(|b| b.map.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("a problem needs at least one block"));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::config(format!(
                "relaxation must lie strictly between 0 and 2, got {}",
                self.relaxation
            )));
        }
        let primal_dim = self.primal_dim();
        let n = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            if block.map.input_dim() != primal_dim {
                return Err(Error::ShapeMismatch {
                    context: "coupling map input dims disagree",
                    expected: primal_dim,
                    got: block.map.input_dim(),
                });
            }
            if i + 1 == n && !block.map.is_identity() {
                return Err(Error::config(
                    "the last block's coupling map must be the identity",
                ));
            }
            let lipschitz = block.forward.lipschitz();
            match &block.scheme {
                BlockScheme::OneStepFixed {
                    averaging,
                    stepsize,
                } => {
                    if !(*averaging > 0.0 && *averaging <= 1.0) {
                        return Err(Error::config(format!(
                            "block {i}: averaging must lie in (0, 1], got {averaging}"
                        )));
                    }
                    if !(*stepsize > 0.0 && stepsize.is_finite()) {
                        return Err(Error::config(format!(
                            "block {i}: stepsize must be positive, got {stepsize}"
                        )));
                    }
                    if lipschitz > 0.0 {
                        if *averaging >= 1.0 {
                            return Err(Error::config(format!(
                                "block {i}: averaging must be below 1 when the forward \
                                 map is not constant"
                            )));
                        }
                        let bound = 2.0 * (1.0 - averaging) / lipschitz;
                        if *stepsize > bound {
                            return Err(Error::config(format!(
                                "block {i}: stepsize {stepsize} exceeds the cocoercivity \
                                 bound {bound}"
                            )));
                        }
                    }
                }
                BlockScheme::OneStepBacktrack(cfg) => {
                    cfg.validate()?;
                    if cfg.anchor_point.len() != block.map.output_dim() {
                        return Err(Error::ShapeMismatch {
                            context: "backtracking anchor vs block dim",
                            expected: block.map.output_dim(),
                            got: cfg.anchor_point.len(),
                        });
                    }
                }
                BlockScheme::TwoStepLipschitz { stepsize } => {
                    if !(*stepsize > 0.0 && stepsize.is_finite()) {
                        return Err(Error::config(format!(
                            "block {i}: stepsize must be positive, got {stepsize}"
                        )));
                    }
                    if stepsize * lipschitz >= 1.0 {
                        return Err(Error::config(format!(
                            "block {i}: stepsize {stepsize} must stay below the inverse \
                             Lipschitz constant {}",
                            1.0 / lipschitz
                        )));
                    }
                }
            }
            if let Some(j) = block.stepsize_link {
                if j >= n || j == i {
                    return Err(Error::config(format!(
                        "block {i}: stepsize link target {j} is out of range"
                    )));
                }
                if matches!(block.scheme, BlockScheme::OneStepBacktrack(_)) {
                    return Err(Error::config(format!(
                        "block {i}: a backtracking block discovers its own stepsize and \
                         cannot borrow block {j}'s"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Starting data: the primal-dual iterate plus per-block starting points.
#[derive(Debug, Clone)]
pub struct SolveInit {
    pub point: PrimalDualPoint,
    pub block_x: Vec<Vector>,
    /// Optional per-block starting pairs `y_i in (A_i + B_i) x_i`. When absent
    /// a backtracking block seeds itself with one extra resolvent step.
    pub block_y: Option<Vec<Vector>>,
}

impl SolveInit {
    /// Zero duals and `x_i = G_i z0`.
    pub fn from_primal(problem: &ProblemSpec, z0: Vector) -> Result<Self> {
        ensure_finite(&z0, "initial primal point")?;
        let n = problem.blocks.len();
        let w = problem.blocks[..n - 1]
            .iter()
            .map(|b| Vector::zeros(b.map.output_dim()))
            .collect();
        let block_x = problem.blocks.iter().map(|b| b.map.apply(&z0)).collect();
        Ok(SolveInit {
            point: PrimalDualPoint { z: z0, w },
            block_x,
            block_y: None,
        })
    }

    fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let n = problem.blocks.len();
        if self.point.w.len() + 1 != n {
            return Err(Error::ShapeMismatch {
                context: "initial duals vs blocks",
                expected: n - 1,
                got: self.point.w.len(),
            });
        }
        if self.point.z.len() != problem.primal_dim() {
            return Err(Error::ShapeMismatch {
                context: "initial primal point",
                expected: problem.primal_dim(),
                got: self.point.z.len(),
            });
        }
        ensure_finite(&self.point.z, "initial primal point")?;
        if self.block_x.len() != n {
            return Err(Error::ShapeMismatch {
                context: "initial block points vs blocks",
                expected: n,
                got: self.block_x.len(),
            });
        }
        for (i, (x, block)) in self.block_x.iter().zip(&problem.blocks).enumerate() {
            if x.len() != block.map.output_dim() {
                return Err(Error::ShapeMismatch {
                    context: "initial block point dim",
                    expected: block.map.output_dim(),
                    got: x.len(),
                });
            }
            ensure_finite(x, "initial block point")?;
            if i < n - 1 {
                let w = &self.point.w[i];
                if w.len() != block.map.output_dim() {
                    return Err(Error::ShapeMismatch {
                        context: "initial dual dim",
                        expected: block.map.output_dim(),
                        got: w.len(),
                    });
                }
                ensure_finite(w, "initial dual point")?;
            }
        }
        if let Some(ys) = &self.block_y {
            if ys.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "initial block pairs vs blocks",
                    expected: n,
                    got: ys.len(),
                });
            }
            for (y, block) in ys.iter().zip(&problem.blocks) {
                if y.len() != block.map.output_dim() {
                    return Err(Error::ShapeMismatch {
                        context: "initial block pair dim",
                        expected: block.map.output_dim(),
                        got: y.len(),
                    });
                }
                ensure_finite(y, "initial block pair")?;
            }
        }
        Ok(())
    }
}

/// Stopping rules and instrumentation for one solve call.
pub struct SolveOptions {
    pub max_iters: usize,
    /// Hyperplane degeneracy threshold; at or below it the current block
    /// pairs are returned as an exact solution.
    pub pi_tol: f64,
    /// Stop once `max(res_primal, res_dual)` falls to this value.
    pub residual_tol: f64,
    /// Record every how-many iterations into the trace; 0 disables tracing.
    pub trace_every: usize,
    /// Extra per-iteration value recorded in the trace, handed the iterate
    /// (before projection) and the fresh block states.
    #[allow(clippy::type_complexity)]
    pub objective: Option<Box<dyn Fn(&PrimalDualPoint, &[BlockState]) -> f64 + Send + Sync>>,
}

pub const DEFAULT_PI_TOL: f64 = 1e-24;

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 1000,
            pi_tol: DEFAULT_PI_TOL,
            residual_tol: 1e-8,
            trace_every: 1,
            objective: None,
        }
    }
}

impl std::fmt::Debug for SolveOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolveOptions")
            .field("max_iters", &self.max_iters)
            .field("pi_tol", &self.pi_tol)
            .field("residual_tol", &self.residual_tol)
            .field("trace_every", &self.trace_every)
            .field("objective", &self.objective.is_some())
            .finish()
    }
}

/// One recorded iteration.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    /// Separator value at the pre-projection iterate.
    pub phi: f64,
    /// Squared gradient norm of the separator.
    pub grad_norm_sq: f64,
    /// Projection step multiplier.
    pub step: f64,
    /// `max_i |G_i z - x_i|` at this iteration's iterate.
    pub res_primal: f64,
    /// `max_i |y_i - w_i|` at this iteration's iterate.
    pub res_dual: f64,
    pub objective: Option<f64>,
    /// Cumulative forward evaluations across all blocks, including seeding.
    pub forward_evals: u64,
    /// Wall-clock seconds since the solve started. Not deterministic.
    pub elapsed: f64,
    /// Stepsize each block used this iteration.
    pub stepsizes: Vec<f64>,
    /// Growth allowance each block carries out of this iteration.
    pub step_growths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Residuals fell below `residual_tol`.
    ConvergedResidual,
    /// The hyperplane degenerated; the returned point is an exact solution
    /// assembled from the block pairs.
    TerminalCertificate,
    MaxIters,
}

#[derive(Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub iters: usize,
    pub point: PrimalDualPoint,
    /// Final block pairs `(x_i, y_i)`.
    pub blocks: Vec<BlockPair>,
    pub res_primal: f64,
    pub res_dual: f64,
    pub trace: Vec<TraceRow>,
    /// Forward evaluations this solve spent (seeding included).
    pub forward_evals: u64,
    /// Resolvent applications this solve spent (seeding included).
    pub resolvent_calls: u64,
}

/// Everything one iteration produced, lent to the observer callback for
/// invariant auditing.
pub struct IterationSnapshot<'a> {
    pub iter: usize,
    pub point_before: &'a PrimalDualPoint,
    pub states_before: &'a [BlockState],
    pub states_after: &'a [BlockState],
    /// `G_i z` per block, for the pre-projection iterate.
    pub mapped_primal: &'a [Vector],
    /// Dual value each block saw, the derived one for the last block.
    pub duals: &'a [Vector],
    /// Backtracking trials per block; zero for blocks that do not backtrack.
    pub trials: &'a [usize],
    pub hyperplane: &'a Hyperplane,
    pub projection: &'a Projection,
}

pub fn solve(problem: &ProblemSpec, init: &SolveInit, opts: &SolveOptions) -> Result<SolveResult> {
    solve_observed(problem, init, opts, |_| {})
}

/// [`solve`] with a per-iteration callback that sees the full internal state.
pub fn solve_observed(
    problem: &ProblemSpec,
    init: &SolveInit,
    opts: &SolveOptions,
    mut observer: impl FnMut(&IterationSnapshot<'_>),
) -> Result<SolveResult> {
    problem.validate()?;
    init.validate(problem)?;
    let start = Instant::now();
    let n = problem.blocks.len();
    let maps = problem.maps();

    let forward_base: u64 = problem.blocks.iter().map(|b| b.forward.eval_count()).sum();
    let resolvent_base: u64 = problem.blocks.iter().map(|b| b.resolvent.call_count()).sum();
    let spent_forward = |problem: &ProblemSpec| {
        problem
            .blocks
            .iter()
            .map(|b| b.forward.eval_count())
            .sum::<u64>()
            - forward_base
    };

    // Seed per-block states. Backtracking blocks need a genuine operator pair
    // to start from; the others only need their starting point and a cached
    // forward value.
    let mut states: Vec<BlockState> = Vec::with_capacity(n);
    for (i, block) in problem.blocks.iter().enumerate() {
        let x0 = &init.block_x[i];
        let y0 = init.block_y.as_ref().map(|ys| &ys[i]);
        let state = match &block.scheme {
            BlockScheme::OneStepBacktrack(cfg) => match y0 {
                Some(y0) => seed_state_with_pair(x0, y0, cfg.initial_stepsize, &block.forward),
                None => seed_state(x0, cfg.initial_stepsize, &block.resolvent, &block.forward),
            },
            BlockScheme::OneStepFixed { stepsize, .. } => match y0 {
                Some(y0) => seed_state_with_pair(x0, y0, *stepsize, &block.forward),
                None => seed_state_plain(x0, *stepsize, &block.forward),
            },
            BlockScheme::TwoStepLipschitz { stepsize } => match y0 {
                Some(y0) => seed_state_with_pair(x0, y0, *stepsize, &block.forward),
                None => seed_state_plain(x0, *stepsize, &block.forward),
            },
        };
        states.push(state);
    }

    let mut point = init.point.clone();
    let mut status = SolveStatus::MaxIters;
    let mut iters = 0;
    let mut trace = Vec::new();
    let mut res_primal = f64::INFINITY;
    let mut res_dual = f64::INFINITY;

    for k in 1..=opts.max_iters {
        iters = k;

        let mut duals: Vec<Vector> = point.w.clone();
        duals.push(point.last_dual(&maps));
        let mapped_primal: Vec<Vector> = maps.iter().map(|m| m.apply(&point.z)).collect();

        let mut states_new: Vec<BlockState> = Vec::with_capacity(n);
        let mut trials = vec![0usize; n];
        for (i, block) in problem.blocks.iter().enumerate() {
            let gz = &mapped_primal[i];
            let w = &duals[i];
            let linked_stepsize = block.stepsize_link.map(|j| {
                if j < i {
                    states_new[j].stepsize
                } else {
                    states[j].stepsize
                }
            });
            let state = match &block.scheme {
                BlockScheme::OneStepFixed {
                    averaging,
                    stepsize,
                } => one_forward_step(
                    gz,
                    &states[i],
                    w,
                    *averaging,
                    linked_stepsize.unwrap_or(*stepsize),
                    &block.resolvent,
                    &block.forward,
                ),
                BlockScheme::OneStepBacktrack(cfg) => {
                    let out = backtrack(
                        gz,
                        &states[i],
                        w,
                        cfg,
                        &block.resolvent,
                        &block.forward,
                        i,
                        k,
                    )?;
                    trials[i] = out.trials;
                    out.state
                }
                BlockScheme::TwoStepLipschitz { stepsize } => two_forward_step(
                    gz,
                    w,
                    linked_stepsize.unwrap_or(*stepsize),
                    &block.resolvent,
                    &block.forward,
                ),
            };
            states_new.push(state);
        }

        let pairs: Vec<BlockPair> = states_new
            .iter()
            .map(|s| BlockPair {
                x: s.x.clone(),
                y: s.y.clone(),
            })
            .collect();
        let hplane = Hyperplane::build(&pairs, &maps, &problem.metric)?;
        let projection = project_onto_halfspace(
            &point,
            &hplane,
            &problem.metric,
            problem.relaxation,
            opts.pi_tol,
        )?;

        res_primal = 0.0;
        res_dual = 0.0;
        for i in 0..n {
            res_primal = res_primal.max(norm(&(&mapped_primal[i] - &states_new[i].x)));
            res_dual = res_dual.max(norm(&(&states_new[i].y - &duals[i])));
        }
        if !(res_primal.is_finite() && res_dual.is_finite()) || !projection.next.is_finite() {
            return Err(Error::NonFinite {
                context: "solver iterate",
                iter: k,
            });
        }

        observer(&IterationSnapshot {
            iter: k,
            point_before: &point,
            states_before: &states,
            states_after: &states_new,
            mapped_primal: &mapped_primal,
            duals: &duals,
            trials: &trials,
            hyperplane: &hplane,
            projection: &projection,
        });

        let terminal = projection.terminal;
        let converged = res_primal.max(res_dual) <= opts.residual_tol;
        if opts.trace_every > 0 && (k % opts.trace_every == 0 || terminal || converged) {
            trace.push(TraceRow {
                iter: k,
                phi: projection.phi_value,
                grad_norm_sq: projection.grad_norm_sq,
                step: projection.step,
                res_primal,
                res_dual,
                objective: opts.objective.as_ref().map(|f| f(&point, &states_new)),
                forward_evals: spent_forward(problem),
                elapsed: start.elapsed().as_secs_f64(),
                stepsizes: states_new.iter().map(|s| s.stepsize).collect(),
                step_growths: states_new.iter().map(|s| s.step_growth).collect(),
            });
        }

        point = projection.next;
        states = states_new;

        if terminal {
            status = SolveStatus::TerminalCertificate;
            break;
        }
        if converged {
            status = SolveStatus::ConvergedResidual;
            break;
        }
    }

    let resolvent_calls = problem
        .blocks
        .iter()
        .map(|b| b.resolvent.call_count())
        .sum::<u64>()
        - resolvent_base;

    Ok(SolveResult {
        status,
        iters,
        point,
        blocks: states
            .iter()
            .map(|s| BlockPair {
                x: s.x.clone(),
                y: s.y.clone(),
            })
            .collect(),
        res_primal,
        res_dual,
        trace,
        forward_evals: spent_forward(problem),
        resolvent_calls,
    })
}

/// Residuals of a candidate iterate against a set of block pairs:
/// `(max_i |G_i z - x_i|, max_i |y_i - w_i|)` with the last dual derived.
pub fn residuals(
    problem: &ProblemSpec,
    point: &PrimalDualPoint,
    pairs: &[BlockPair],
) -> Result<(f64, f64)> {
    let n = problem.blocks.len();
    if pairs.len() != n || point.w.len() + 1 != n {
        return Err(Error::ShapeMismatch {
            context: "residual inputs vs blocks",
            expected: n,
            got: pairs.len(),
        });
    }
    let maps = problem.maps();
    let mut res_primal = 0.0f64;
    let mut res_dual = 0.0f64;
    for i in 0..n {
        let gz = maps[i].apply(&point.z);
        let w = if i + 1 < n {
            point.w[i].clone()
        } else {
            point.last_dual(&maps)
        };
        res_primal = res_primal.max(norm(&(&gz - &pairs[i].x)));
        res_dual = res_dual.max(norm(&(&pairs[i].y - &w)));
    }
    Ok((res_primal, res_dual))
}

/// Per-block optimality report for a candidate primal-dual point.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// `|resolvent_{A_i}(G_i z + w_i - B_i G_i z) - G_i z|` per block; zero
    /// exactly when `w_i` is a valid operator value at `G_i z`.
    pub block_residuals: Vec<f64>,
    pub max_residual: f64,
    pub pass: bool,
}

/// Checks whether `point` solves the inclusion: for every block the dual
/// value must belong to the block operator at `G_i z`, the last block using
/// the derived dual. Membership is measured through one resolvent
/// application, so a zero residual is an exact certificate.
pub fn kkt_check(problem: &ProblemSpec, point: &PrimalDualPoint, tol: f64) -> Result<KktReport> {
    problem.validate()?;
    let n = problem.blocks.len();
    if point.w.len() + 1 != n {
        return Err(Error::ShapeMismatch {
            context: "candidate duals vs blocks",
            expected: n - 1,
            got: point.w.len(),
        });
    }
    let maps = problem.maps();
    let mut block_residuals = Vec::with_capacity(n);
    for (i, block) in problem.blocks.iter().enumerate() {
        let gz = block.map.apply(&point.z);
        let w = if i + 1 < n {
            point.w[i].clone()
        } else {
            point.last_dual(&maps)
        };
        let forward_at = block.forward.eval(&gz);
        let probe = &gz + &(&w - &forward_at);
        let (projected, _) = block.resolvent.apply(&probe, 1.0);
        block_residuals.push(norm(&(&projected - &gz)));
    }
    let max_residual = block_residuals.iter().cloned().fold(0.0, f64::max);
    Ok(KktReport {
        pass: max_residual <= tol,
        block_residuals,
        max_residual,
    })
}
