//! Block updates: resolvent plus forward-step maps, and stepsize backtracking.
//!
//! Each block owns a set-valued monotone operator `A` reached through its
//! resolvent and a single-valued monotone map `B` reached through forward
//! evaluations. The one-forward-step update produces a new pair
//! `(x, y)` with `y in (A + B) x` from
//!
//! ```text
//! t = (1 - averaging) x_prev + averaging * Gz - stepsize * (B x_prev - w)
//! x = resolvent_{stepsize A}(t)
//! y = (t - x) / stepsize + B x
//! ```
//!
//! spending exactly one new evaluation of `B` because `B x_prev` is cached
//! from the previous iteration. For merely Lipschitz `B` the two-forward-step
//! update evaluates `B` twice per iteration, at `Gz` and at the new point.
//! When no curvature constant for `B` is known, [`backtrack`] finds a working
//! stepsize by shrinking trials until two acceptance inequalities hold; those
//! inequalities are exactly what the convergence argument consumes, and they
//! are re-checkable in isolation through [`ascent_check`] and
//! [`contractive_check`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::space::{inner, norm, norm_sq, Vector};

/// Resolvent access to a maximal monotone operator `A`.
///
/// The wrapped closure receives `(t, stepsize)` and must return
/// `x = (I + stepsize * A)^{-1} t`. [`Resolvent::apply`] also returns the
/// operator element `a = (t - x) / stepsize`, which lies in `A x` by the
/// resolvent characterization. Evaluations are counted; clones share both the
/// underlying map and the counter.
#[derive(Clone)]
pub struct Resolvent {
    map: Arc<dyn Fn(&Vector, f64) -> Vector + Send + Sync>,
    calls: Arc<AtomicU64>,
}

impl Resolvent {
    pub fn new(map: impl Fn(&Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        Resolvent {
            map: Arc::new(map),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Applies the resolvent at `stepsize`, returning `(x, a)` with
    /// `x + stepsize * a = t` up to roundoff and `a in A x`.
    pub fn apply(&self, t: &Vector, stepsize: f64) -> (Vector, Vector) {
        debug_assert!(stepsize > 0.0);
        self.calls.fetch_add(1, Ordering::Relaxed);
        let x = (self.map)(t, stepsize);
        debug_assert_eq!(x.len(), t.len());
        let a = (t - &x) / stepsize;
        (x, a)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl std::fmt::Debug for Resolvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolvent")
            .field("calls", &self.call_count())
            .finish()
    }
}

/// Forward (explicit) access to the single-valued part `B` of a block.
///
/// `lipschitz` is the declared smoothness constant: for blocks run with a
/// fixed stepsize it is the cocoercivity/Lipschitz constant the stepsize
/// bound is checked against, and `0` declares a constant map. Evaluations are
/// counted so tests and traces can audit the per-iteration budget; clones
/// share both the underlying map and the counter.
#[derive(Clone)]
pub struct ForwardOp {
    map: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
    lipschitz: f64,
    calls: Arc<AtomicU64>,
}

impl ForwardOp {
    pub fn new(
        lipschitz: f64,
        map: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(Error::config(format!(
                "forward map smoothness constant must be finite and >= 0, got {lipschitz}"
            )));
        }
        Ok(ForwardOp {
            map: Arc::new(map),
            lipschitz,
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    /// The zero map, the usual choice when a block has no smooth part.
    pub fn zero(dim: usize) -> Self {
        ForwardOp {
            map: Arc::new(move |_| Vector::zeros(dim)),
            lipschitz: 0.0,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.map)(x)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// True when the declared constant is zero, meaning `B` does not vary.
    pub fn is_constant(&self) -> bool {
        self.lipschitz == 0.0
    }

    pub fn eval_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl std::fmt::Debug for ForwardOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardOp")
            .field("lipschitz", &self.lipschitz)
            .field("calls", &self.eval_count())
            .finish()
    }
}

/// Per-block iterate carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub x: Vector,
    /// Operator element with `y in (A + B) x`.
    pub y: Vector,
    /// Cached `B x`, reused by the next one-forward-step update.
    pub forward_value: Vector,
    /// The candidate `y` formed with the previous iteration's forward value
    /// instead of the fresh one; its distance to `w` relative to `y`'s drives
    /// the stepsize growth allowance.
    pub y_stale: Vector,
    /// Stepsize this state was produced with.
    pub stepsize: f64,
    /// Growth allowance for the next backtracking trial interval.
    pub step_growth: f64,
}

/// How the first trial stepsize of a backtracking pass is picked within the
/// allowed interval `[previous, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrialRule {
    /// Start at the interval's upper end (the default).
    #[default]
    UpperBound,
    /// Reuse the previously accepted stepsize.
    Previous,
    /// Grow the previous stepsize by 10%, capped at the upper end.
    GrowCapped,
}

/// Configuration of the backtracking stepsize search for one block.
#[derive(Debug, Clone)]
pub struct BacktrackConfig {
    /// Averaging weight in (0, 1]; values below 1 are required for the search
    /// to be guaranteed to terminate when `B` is not constant.
    pub averaging: f64,
    /// Multiplicative shrink factor in (0, 1) applied after a rejected trial.
    pub shrink: f64,
    /// Global cap on every trial stepsize.
    pub stepsize_cap: f64,
    /// Stepsize the block starts from.
    pub initial_stepsize: f64,
    pub trial_rule: TrialRule,
    /// A point whose operator value is known; the iterates' distance to it is
    /// what the acceptance inequality keeps bounded.
    pub anchor_point: Vector,
    /// An element of `(A + B) anchor_point`.
    pub anchor_value: Vector,
    /// Retry budget per iteration before giving up with an error.
    pub max_trials: usize,
}

pub const DEFAULT_MAX_TRIALS: usize = 100;

/// Squared-norm floor below which the growth ratio is defined as zero.
const GROWTH_GUARD: f64 = 1e-24;

impl BacktrackConfig {
    pub fn new(anchor_point: Vector, anchor_value: Vector) -> Self {
        BacktrackConfig {
            averaging: 0.1,
            shrink: 0.7,
            stepsize_cap: 1.0,
            initial_stepsize: 1.0,
            trial_rule: TrialRule::default(),
            anchor_point,
            anchor_value,
            max_trials: DEFAULT_MAX_TRIALS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.averaging > 0.0 && self.averaging <= 1.0) {
            return Err(Error::config(format!(
                "backtracking averaging must lie in (0, 1], got {}",
                self.averaging
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::config(format!(
                "backtracking shrink must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        if !(self.initial_stepsize > 0.0 && self.initial_stepsize.is_finite()) {
            return Err(Error::config(format!(
                "initial backtracking stepsize must be positive and finite, got {}",
                self.initial_stepsize
            )));
        }
        if !(self.stepsize_cap >= self.initial_stepsize && self.stepsize_cap.is_finite()) {
            return Err(Error::config(format!(
                "stepsize cap {} must be finite and at least the initial stepsize {}",
                self.stepsize_cap, self.initial_stepsize
            )));
        }
        if self.max_trials == 0 {
            return Err(Error::config("backtracking needs at least one trial"));
        }
        if self.anchor_point.len() != self.anchor_value.len() {
            return Err(Error::ShapeMismatch {
                context: "backtracking anchor",
                expected: self.anchor_point.len(),
                got: self.anchor_value.len(),
            });
        }
        Ok(())
    }
}

/// One-forward-step update for one block.
///
/// `gz` is the current primal iterate already pushed through this block's
/// coupling map. `averaging` may be anything in `[0, 1]` here; the endpoint 0
/// reduces the update to a plain forward-backward step on `x` (used by the
/// boundary-equivalence checks) and is rejected by solver-level validation.
///
/// Spends exactly one forward evaluation (at the new point) and one resolvent
/// application.
pub fn one_forward_step(
    gz: &Vector,
    state: &BlockState,
    w: &Vector,
    averaging: f64,
    stepsize: f64,
    resolvent: &Resolvent,
    forward: &ForwardOp,
) -> BlockState {
    debug_assert!((0.0..=1.0).contains(&averaging));
    debug_assert!(stepsize > 0.0);
    let t = &state.x * (1.0 - averaging) + &(gz * averaging)
        - &((&state.forward_value - w) * stepsize);
    let (x, a) = resolvent.apply(&t, stepsize);
    let y_stale = &a + &state.forward_value;
    let forward_value = forward.eval(&x);
    let y = &a + &forward_value;
    BlockState {
        x,
        y,
        forward_value,
        y_stale,
        stepsize,
        step_growth: state.step_growth,
    }
}

/// Two-forward-step update for a block whose `B` is Lipschitz but not
/// cocoercive. Requires `stepsize * lipschitz < 1`; spends two forward
/// evaluations (at `gz` and at the new point) and one resolvent application.
pub fn two_forward_step(
    gz: &Vector,
    w: &Vector,
    stepsize: f64,
    resolvent: &Resolvent,
    forward: &ForwardOp,
) -> BlockState {
    debug_assert!(stepsize > 0.0);
    let b_at_gz = forward.eval(gz);
    let t = gz - &((&b_at_gz - w) * stepsize);
    let (x, a) = resolvent.apply(&t, stepsize);
    let forward_value = forward.eval(&x);
    let y = &a + &forward_value;
    let y_stale = &a + &b_at_gz;
    BlockState {
        x,
        y,
        forward_value,
        y_stale,
        stepsize,
        step_growth: 0.0,
    }
}

/// Signed margin of an inequality check; `holds` means `slack >= -tol`.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub holds: bool,
    pub slack: f64,
}

fn report(slack: f64, tol: f64) -> CheckReport {
    CheckReport {
        holds: slack >= -tol,
        slack,
    }
}

/// Verifies the per-iteration lower bound on the new separator term:
///
/// ```text
/// <gz - x, y - w>  >=  s/(2 a) * (|y - w|^2 + a |y_stale - w|^2)
///                      + (1 - a) * (prev_phi - s/(2 a) * prev_y_gap_sq)
/// ```
///
/// with `s` the stepsize and `a` the averaging weight of `candidate`.
/// `prev_phi` is the same inner product at the previous state and
/// `prev_y_gap_sq = |y_prev - w|^2`. This holds automatically whenever the
/// stepsize respects the smoothness bound `s <= 2 (1 - a) / L`, and is one of
/// the two acceptance conditions of [`backtrack`].
pub fn ascent_check(
    gz: &Vector,
    prev_phi: f64,
    prev_y_gap_sq: f64,
    candidate: &BlockState,
    w: &Vector,
    averaging: f64,
    tol: f64,
) -> CheckReport {
    let s = candidate.stepsize;
    let phi_new = inner(&(gz - &candidate.x), &(&candidate.y - w));
    let y_gap_sq = norm_sq(&(&candidate.y - w));
    let stale_gap_sq = norm_sq(&(&candidate.y_stale - w));
    let half = s / (2.0 * averaging);
    let rhs = half * (y_gap_sq + averaging * stale_gap_sq)
        + (1.0 - averaging) * (prev_phi - half * prev_y_gap_sq);
    report(phi_new - rhs, tol)
}

/// Verifies that the candidate point did not move away from the anchor faster
/// than the update can account for:
///
/// ```text
/// |x - anchor|  <=  (1 - a) |x_prev - anchor| + a |gz - anchor|
///                   + s |w - anchor_value|
/// ```
///
/// The anchor is any point in the domain of the block's `A` paired with an
/// operator value `anchor_value in (A + B) anchor`. The bound is guaranteed
/// when the stepsize respects the smoothness bound `s <= 2 (1 - a) / L` (any
/// stepsize when `B` is constant); [`backtrack`] uses it as the other
/// acceptance condition precisely because shrinking the stepsize eventually
/// makes it hold.
pub fn contractive_check(
    gz: &Vector,
    prev_x: &Vector,
    candidate: &BlockState,
    w: &Vector,
    averaging: f64,
    anchor_point: &Vector,
    anchor_value: &Vector,
    tol: f64,
) -> CheckReport {
    let s = candidate.stepsize;
    let lhs = norm(&(&candidate.x - anchor_point));
    let rhs = (1.0 - averaging) * norm(&(prev_x - anchor_point))
        + averaging * norm(&(gz - anchor_point))
        + s * norm(&(w - anchor_value));
    report(rhs - lhs, tol)
}

/// Result of a backtracking pass: the accepted state and how many trials the
/// inner loop spent (1 means the first candidate was accepted).
#[derive(Debug)]
pub struct Backtracked {
    pub state: BlockState,
    pub trials: usize,
}

/// Runs the one-forward-step update under a backtracking stepsize search.
///
/// The trial interval starts at the previously accepted stepsize and extends
/// up to `(1 + averaging * step_growth)` times it, capped by
/// `cfg.stepsize_cap`; `cfg.trial_rule` picks the starting point inside the
/// interval. A trial is accepted when both [`ascent_check`] and
/// [`contractive_check`] pass; otherwise the stepsize is multiplied by
/// `cfg.shrink` and the update is retried, each retry costing one forward
/// evaluation. When `B` is constant the very first trial is always accepted.
///
/// On acceptance the state's growth allowance is set to
/// `|y_stale - w|^2 / |y - w|^2` (zero when the denominator vanishes), which
/// lets later iterations probe larger stepsizes again.
///
/// `block` and `iter` only label the error when the retry budget runs out.
pub fn backtrack(
    gz: &Vector,
    state: &BlockState,
    w: &Vector,
    cfg: &BacktrackConfig,
    resolvent: &Resolvent,
    forward: &ForwardOp,
    block: usize,
    iter: usize,
) -> Result<Backtracked> {
    let averaging = cfg.averaging;
    let prev_phi = inner(&(gz - &state.x), &(&state.y - w));
    let prev_y_gap_sq = norm_sq(&(&state.y - w));

    let upper = ((1.0 + averaging * state.step_growth) * state.stepsize).min(cfg.stepsize_cap);
    let mut trial = match cfg.trial_rule {
        TrialRule::UpperBound => upper,
        TrialRule::Previous => state.stepsize.min(upper),
        TrialRule::GrowCapped => (1.1 * state.stepsize).min(upper),
    };

    for j in 1..=cfg.max_trials {
        let candidate =
            one_forward_step(gz, state, w, averaging, trial, resolvent, forward);

        // Accept up to roundoff: both inequalities hold exactly in exact
        // arithmetic once the trial stepsize is small enough, so only float
        // noise is forgiven here.
        let scale = 1.0 + prev_phi.abs() + prev_y_gap_sq;
        let ascent = ascent_check(
            gz,
            prev_phi,
            prev_y_gap_sq,
            &candidate,
            w,
            averaging,
            1e-12 * scale,
        );
        let contractive = contractive_check(
            gz,
            &state.x,
            &candidate,
            w,
            averaging,
            &cfg.anchor_point,
            &cfg.anchor_value,
            1e-12 * (1.0 + norm(&candidate.x)),
        );

        if ascent.holds && contractive.holds {
            let y_gap_sq = norm_sq(&(&candidate.y - w));
            let step_growth = if y_gap_sq < GROWTH_GUARD {
                0.0
            } else {
                norm_sq(&(&candidate.y_stale - w)) / y_gap_sq
            };
            return Ok(Backtracked {
                state: BlockState {
                    step_growth,
                    ..candidate
                },
                trials: j,
            });
        }
        trial *= cfg.shrink;
    }

    Err(Error::BacktrackExhausted {
        block,
        iter,
        trials: cfg.max_trials,
        last_stepsize: trial / cfg.shrink,
    })
}

/// Builds a block's starting state from `x0` alone.
///
/// One resolvent application at `stepsize` on `t = x0 - stepsize * B x0`
/// lands on a point `x` where `y = (t - x)/stepsize + B x` is a genuine
/// element of `(A + B) x`, which the backtracking conditions need from their
/// very first iteration. Costs two forward evaluations.
pub fn seed_state(
    x0: &Vector,
    stepsize: f64,
    resolvent: &Resolvent,
    forward: &ForwardOp,
) -> BlockState {
    let b0 = forward.eval(x0);
    let t = x0 - &(&b0 * stepsize);
    let (x, a) = resolvent.apply(&t, stepsize);
    let forward_value = forward.eval(&x);
    let y = &a + &forward_value;
    let y_stale = &a + &b0;
    BlockState {
        x,
        y,
        forward_value,
        y_stale,
        stepsize,
        step_growth: 0.0,
    }
}

/// Starting state for blocks that never read `y` before overwriting it:
/// keeps `x0` as-is and caches `B x0`. Costs one forward evaluation.
pub fn seed_state_plain(x0: &Vector, stepsize: f64, forward: &ForwardOp) -> BlockState {
    let forward_value = forward.eval(x0);
    BlockState {
        x: x0.clone(),
        y: forward_value.clone(),
        forward_value: forward_value.clone(),
        y_stale: forward_value,
        stepsize,
        step_growth: 0.0,
    }
}

/// Starting state from a user-supplied pair `(x0, y0)` with
/// `y0 in (A + B) x0`. Costs one forward evaluation for the cache.
pub fn seed_state_with_pair(
    x0: &Vector,
    y0: &Vector,
    stepsize: f64,
    forward: &ForwardOp,
) -> BlockState {
    let forward_value = forward.eval(x0);
    BlockState {
        x: x0.clone(),
        y: y0.clone(),
        forward_value,
        y_stale: y0.clone(),
        stepsize,
        step_growth: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    fn identity_resolvent() -> Resolvent {
        Resolvent::new(|t, _| t.clone())
    }

    fn soft_threshold_resolvent() -> Resolvent {
        Resolvent::new(|t, s| t.mapv(|v| v.signum() * (v.abs() - s).max(0.0)))
    }

    fn state(x: f64, y: f64, b: f64, stepsize: f64) -> BlockState {
        BlockState {
            x: arr1(&[x]),
            y: arr1(&[y]),
            forward_value: arr1(&[b]),
            y_stale: arr1(&[y]),
            stepsize,
            step_growth: 0.0,
        }
    }

    #[test]
    fn pure_averaging_step_hand_values() {
        // A = 0, B = 0, averaging 1, stepsize 2.
        let resolvent = identity_resolvent();
        let forward = ForwardOp::zero(1);
        let prev = state(0.5, 0.0, 0.0, 2.0);
        let out = one_forward_step(
            &arr1(&[1.0]),
            &prev,
            &arr1(&[0.3]),
            1.0,
            2.0,
            &resolvent,
            &forward,
        );
        assert_eq!(out.x, arr1(&[1.6]));
        assert_eq!(out.y, arr1(&[0.0]));
        assert_eq!(forward.eval_count(), 1);
        assert_eq!(resolvent.call_count(), 1);
    }

    #[test]
    fn soft_threshold_step_hand_values() {
        // A = subdifferential of |.|, B = identity map, averaging 0.5.
        let resolvent = soft_threshold_resolvent();
        let forward = ForwardOp::new(1.0, |x: &Vector| x.clone()).unwrap();
        let prev = state(0.5, 0.0, 0.5, 1.0);
        let out = one_forward_step(
            &arr1(&[1.0]),
            &prev,
            &arr1(&[0.0]),
            0.5,
            1.0,
            &resolvent,
            &forward,
        );
        // t = 0.5*0.5 + 0.5*1 - 1*(0.5-0) = 0.25, x = soft(0.25, 1) = 0
        assert_eq!(out.x, arr1(&[0.0]));
        assert_eq!(out.y, arr1(&[0.25]));
        assert!(out.y[0].abs() <= 1.0 + 1e-15); // inside the subdifferential ball
        assert_eq!(forward.eval_count(), 1);
    }

    #[test]
    fn two_forward_step_hand_values() {
        let resolvent = soft_threshold_resolvent();
        let forward = ForwardOp::new(1.0, |x: &Vector| x.clone()).unwrap();
        let gz = arr1(&[1.0]);
        let out = two_forward_step(&gz, &arr1(&[0.0]), 0.5, &resolvent, &forward);
        // t = 1 - 0.5*1 = 0.5, x = soft(0.5, 0.5) = 0, a = 1, y = 1
        assert_eq!(out.x, arr1(&[0.0]));
        assert_eq!(out.y, arr1(&[1.0]));
        assert_eq!(forward.eval_count(), 2);

        // The new separator term is at least (1/stepsize - L) |gz - x|^2.
        let phi = inner(&(&gz - &out.x), &out.y);
        let floor = (1.0 / 0.5 - 1.0) * norm_sq(&(&gz - &out.x));
        assert!(phi >= floor - 1e-12);
        assert_eq!(phi, 1.0);
    }

    #[test]
    fn backtrack_accepts_first_trial_for_constant_forward() {
        let resolvent = soft_threshold_resolvent();
        let forward = ForwardOp::new(0.0, |_: &Vector| arr1(&[0.3])).unwrap();
        assert!(forward.is_constant());

        let prev = seed_state(&arr1(&[2.0]), 1.0, &resolvent, &forward);
        let mut cfg = BacktrackConfig::new(prev.x.clone(), prev.y.clone());
        cfg.averaging = 0.5;
        cfg.shrink = 0.7;
        cfg.stepsize_cap = 8.0;
        cfg.initial_stepsize = 1.0;
        cfg.validate().unwrap();

        let before = forward.eval_count();
        let out = backtrack(
            &arr1(&[1.0]),
            &prev,
            &arr1(&[0.1]),
            &cfg,
            &resolvent,
            &forward,
            0,
            1,
        )
        .unwrap();
        assert_eq!(out.trials, 1);
        assert_eq!(forward.eval_count() - before, 1);
        // Upper-end rule with zero growth allowance: trial = previous stepsize.
        assert_eq!(out.state.stepsize, 1.0);
        // Constant forward map makes the stale and fresh candidates identical,
        // so the growth ratio is exactly one.
        assert_eq!(out.state.step_growth, 1.0);
    }

    #[test]
    fn backtrack_respects_shrink_floor_and_reverifies() {
        // A = 0, B = identity (L = 1), averaging 0.5: guaranteed acceptance
        // once the trial drops to 2 (1 - 0.5) / 1 = 1, so the accepted value
        // can never shrink below 0.7 starting from trials at 10 * 0.7^j.
        let resolvent = identity_resolvent();
        let forward = ForwardOp::new(1.0, |x: &Vector| x.clone()).unwrap();
        let prev = BlockState {
            x: arr1(&[2.0]),
            y: arr1(&[2.0]),
            forward_value: arr1(&[2.0]),
            y_stale: arr1(&[2.0]),
            stepsize: 10.0,
            step_growth: 0.0,
        };
        let mut cfg = BacktrackConfig::new(arr1(&[1.0]), arr1(&[1.0]));
        cfg.averaging = 0.5;
        cfg.shrink = 0.7;
        cfg.stepsize_cap = 10.0;
        cfg.initial_stepsize = 10.0;
        cfg.validate().unwrap();

        let gz = arr1(&[1.5]);
        let w = arr1(&[0.3]);
        let out = backtrack(&gz, &prev, &w, &cfg, &resolvent, &forward, 0, 1).unwrap();

        let floor = 2.0 * cfg.shrink * (1.0 - cfg.averaging) / forward.lipschitz();
        assert!(out.state.stepsize >= floor - 1e-12);
        // Retry bound for a known smoothness constant.
        let bound = (floor / cfg.stepsize_cap).log(cfg.shrink).ceil() as usize + 1;
        assert!(out.trials <= bound, "trials {} > bound {}", out.trials, bound);

        // Re-verify both acceptance inequalities at the returned state.
        let prev_phi = inner(&(&gz - &prev.x), &(&prev.y - &w));
        let prev_gap = norm_sq(&(&prev.y - &w));
        assert!(ascent_check(&gz, prev_phi, prev_gap, &out.state, &w, 0.5, 1e-8).holds);
        assert!(contractive_check(
            &gz,
            &prev.x,
            &out.state,
            &w,
            0.5,
            &cfg.anchor_point,
            &cfg.anchor_value,
            1e-8
        )
        .holds);

        // Growth ratio matches its definition recomputed from the state.
        let expect = norm_sq(&(&out.state.y_stale - &w)) / norm_sq(&(&out.state.y - &w));
        assert_eq!(out.state.step_growth, expect);
    }

    #[test]
    fn backtrack_errors_when_budget_runs_out() {
        let resolvent = identity_resolvent();
        // Understated smoothness: actual slope 1e6.
        let forward = ForwardOp::new(1e6, |x: &Vector| x * 1e6).unwrap();
        let prev = BlockState {
            x: arr1(&[1.0]),
            y: arr1(&[1e6]),
            forward_value: arr1(&[1e6]),
            y_stale: arr1(&[1e6]),
            stepsize: 1.0,
            step_growth: 0.0,
        };
        let mut cfg = BacktrackConfig::new(arr1(&[0.0]), arr1(&[0.0]));
        cfg.averaging = 0.5;
        cfg.shrink = 0.9;
        cfg.stepsize_cap = 1.0;
        cfg.initial_stepsize = 1.0;
        cfg.max_trials = 5;
        let err = backtrack(
            &arr1(&[0.9]),
            &prev,
            &arr1(&[0.0]),
            &cfg,
            &resolvent,
            &forward,
            3,
            7,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block 3"), "unexpected message: {msg}");
        assert!(msg.contains("5 trials"), "unexpected message: {msg}");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let base = BacktrackConfig::new(arr1(&[0.0]), arr1(&[0.0]));
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.averaging = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.shrink = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stepsize_cap = 0.5;
        c.initial_stepsize = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.max_trials = 0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.anchor_value = arr1(&[0.0, 0.0]);
        assert!(c.validate().is_err());
    }

    /// Random scalar-block setup with a genuine graph pair for the previous
    /// state: A = subdifferential of lam |.|, B = slope * x (so L = slope).
    fn random_valid_state(
        rng: &mut impl Rng,
        slope: f64,
        resolvent: &Resolvent,
    ) -> BlockState {
        let t0 = arr1(&[rng.random_range(-5.0..5.0)]);
        let s0 = rng.random_range(0.05..2.0);
        let (x, a) = resolvent.apply(&t0, s0);
        let forward_value = &x * slope;
        let y = &a + &forward_value;
        BlockState {
            y_stale: y.clone(),
            x,
            y,
            forward_value,
            stepsize: s0,
            step_growth: 0.0,
        }
    }

    proptest! {
        /// The ascent inequality holds whenever the stepsize respects the
        /// smoothness bound, including exactly at the boundary.
        #[test]
        fn ascent_holds_under_stepsize_bound(
            seed in 0u64..800,
            averaging_pct in 1u32..100,
            at_boundary in proptest::bool::ANY,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let slope = rng.random_range(0.1..4.0);
            let resolvent = soft_threshold_resolvent();
            let forward = ForwardOp::new(slope, move |x: &Vector| x * slope).unwrap();
            let averaging = averaging_pct as f64 / 100.0;
            let bound = 2.0 * (1.0 - averaging) / slope;
            prop_assume!(bound > 1e-6);
            let stepsize = if at_boundary { bound } else { rng.random_range(0.01..1.0) * bound };

            let prev = random_valid_state(&mut rng, slope, &resolvent);
            let gz = arr1(&[rng.random_range(-5.0..5.0)]);
            let w = arr1(&[rng.random_range(-5.0..5.0)]);
            let out = one_forward_step(&gz, &prev, &w, averaging, stepsize, &resolvent, &forward);

            let prev_phi = inner(&(&gz - &prev.x), &(&prev.y - &w));
            let prev_gap = norm_sq(&(&prev.y - &w));
            let check = ascent_check(&gz, prev_phi, prev_gap, &out, &w, averaging, 1e-8);
            prop_assert!(check.holds, "slack {}", check.slack);
        }

        /// The anchored distance bound holds for any anchor with a known
        /// operator value whenever the stepsize respects the smoothness
        /// bound, including exactly at the boundary.
        #[test]
        fn contractive_bound_holds(
            seed in 0u64..800,
            averaging_pct in 1u32..100,
            at_boundary in proptest::bool::ANY,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let slope = rng.random_range(0.1..4.0);
            let resolvent = soft_threshold_resolvent();
            let forward = ForwardOp::new(slope, move |x: &Vector| x * slope).unwrap();
            let averaging = averaging_pct as f64 / 100.0;
            let bound = 2.0 * (1.0 - averaging) / slope;
            prop_assume!(bound > 1e-6);
            let stepsize = if at_boundary { bound } else { rng.random_range(0.01..1.0) * bound };

            let prev = random_valid_state(&mut rng, slope, &resolvent);
            let anchor = random_valid_state(&mut rng, slope, &resolvent);
            let gz = arr1(&[rng.random_range(-5.0..5.0)]);
            let w = arr1(&[rng.random_range(-5.0..5.0)]);
            let out = one_forward_step(&gz, &prev, &w, averaging, stepsize, &resolvent, &forward);

            let check = contractive_check(
                &gz, &prev.x, &out, &w, averaging, &anchor.x, &anchor.y, 1e-8,
            );
            prop_assert!(check.holds, "slack {}", check.slack);
        }
    }
}
