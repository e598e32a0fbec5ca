//! Pointwise verification of HJB, zero-sum HJBI and Nash conditions on a
//! finite evaluation box, with the supremum over controls taken on a finite
//! grid.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::{CylindricalValueFunction, LawFrame, MAX_PAIRINGS};
use crate::dynamics::CoefficientModel;
use crate::error::{invalid, Error, Result};
use crate::jumps::JumpMeasure;
use crate::measures::{GridDensity, LawView};

type Running<U> = Arc<dyn Fn(f64, f64, &LawView, U) -> f64 + Send + Sync>;
type Terminal = Arc<dyn Fn(f64, &LawView) -> f64 + Send + Sync>;

/// Running reward `f(s, x, m, u)` and terminal reward `g(x, m)`.
pub struct RunningCost<U = f64> {
    running: Running<U>,
    terminal: Terminal,
}

impl<U> Clone for RunningCost<U> {
    fn clone(&self) -> Self {
        Self {
            running: Arc::clone(&self.running),
            terminal: Arc::clone(&self.terminal),
        }
    }
}

impl<U> fmt::Debug for RunningCost<U> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RunningCost { .. }")
    }
}

impl<U: Copy + Send + Sync + 'static> RunningCost<U> {
    pub fn new(
        running: impl Fn(f64, f64, &LawView, U) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(f64, &LawView) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            running: Arc::new(running),
            terminal: Arc::new(terminal),
        }
    }

    #[inline]
    pub fn running(&self, s: f64, x: f64, law: &LawView, u: U) -> f64 {
        (self.running)(s, x, law, u)
    }

    #[inline]
    pub fn terminal(&self, x: f64, law: &LawView) -> f64 {
        (self.terminal)(x, law)
    }

    /// `(c f, c g)`.
    pub fn scaled(&self, c: f64) -> Self {
        let (f, g) = (Arc::clone(&self.running), Arc::clone(&self.terminal));
        Self::new(
            move |s, x, law, u| c * f(s, x, law, u),
            move |x, law| c * g(x, law),
        )
    }

    /// `(-f, -g)`, the opponent's reward in a zero-sum game.
    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

/// Finite set of admissible control values searched for the supremum.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<U = f64> {
    values: Vec<U>,
}

impl<U: Copy> ControlGrid<U> {
    pub fn new(values: Vec<U>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("controls", "control grid is empty"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[U] {
        &self.values
    }
}

impl ControlGrid<f64> {
    /// `n` equally spaced values on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) || n == 0 {
            return Err(invalid(
                "controls",
                format!("bad uniform grid [{lo}, {hi}] x {n}"),
            ));
        }
        if n == 1 {
            return Self::new(vec![lo]);
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|i| lo + i as f64 * step).collect())
    }

    /// Fails unless every value lies in `[lo, hi]`.
    pub fn check_within(&self, lo: f64, hi: f64) -> Result<()> {
        match self.values.iter().position(|u| !(*u >= lo && *u <= hi)) {
            Some(i) => Err(invalid(
                "controls",
                format!(
                    "value {} at index {i} is outside [{lo}, {hi}]",
                    self.values[i]
                ),
            )),
            None => Ok(()),
        }
    }
}

/// Evaluation points `(s, x)` crossed with density scenarios for `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBox {
    pub s_points: Vec<f64>,
    pub x_points: Vec<f64>,
    pub scenarios: Vec<GridDensity>,
    /// Terminal time `T` used by the terminal check.
    pub horizon: f64,
}

impl EvalBox {
    pub fn new(
        s_points: Vec<f64>,
        x_points: Vec<f64>,
        scenarios: Vec<GridDensity>,
        horizon: f64,
    ) -> Result<Self> {
        if s_points.is_empty() || x_points.is_empty() || scenarios.is_empty() {
            return Err(invalid("eval_box", "needs at least one s, x and scenario"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        if let Some(s) = s_points.iter().find(|s| !(**s >= 0.0 && **s <= horizon)) {
            return Err(invalid(
                "s_points",
                format!("{s} is outside [0, {horizon}]"),
            ));
        }
        if let Some(x) = x_points.iter().find(|x| !x.is_finite()) {
            return Err(invalid("x_points", format!("{x} is not finite")));
        }
        Ok(Self {
            s_points,
            x_points,
            scenarios,
            horizon,
        })
    }

    /// `n_s` equally spaced times on `[0, T]` and `n_x` states on
    /// `[-x_max, x_max]`.
    pub fn uniform(
        horizon: f64,
        n_s: usize,
        x_max: f64,
        n_x: usize,
        scenarios: Vec<GridDensity>,
    ) -> Result<Self> {
        if n_s < 2 || n_x < 2 {
            return Err(invalid("eval_box", "need at least two points per axis"));
        }
        let s_points = (0..n_s)
            .map(|i| horizon * i as f64 / (n_s - 1) as f64)
            .collect();
        let x_points = (0..n_x)
            .map(|i| -x_max + 2.0 * x_max * i as f64 / (n_x - 1) as f64)
            .collect();
        Self::new(s_points, x_points, scenarios, horizon)
    }

    fn frames(&self) -> Vec<(usize, usize)> {
        (0..self.s_points.len())
            .flat_map(|i| (0..self.scenarios.len()).map(move |k| (i, k)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstPoint {
    pub s: f64,
    pub x: f64,
    pub scenario: usize,
}

/// Outcome of [`hjb_residual`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbReport<U = f64> {
    /// `max |sup_u {f + G_u phi}|` over the box.
    pub max_residual: f64,
    /// Maximizing control at the worst point.
    pub argmax_control: U,
    pub worst_point: WorstPoint,
    /// `max |phi(T, x, m) - g(x, m)|` over the box.
    pub terminal_mismatch: f64,
    pub pass: bool,
}

/// Largest value of `score` over the evaluation results, keeping the first
/// occurrence on ties.
fn worst_of<T: Copy>(items: impl IntoIterator<Item = T>, score: impl Fn(&T) -> f64) -> Option<T> {
    let mut best: Option<(f64, T)> = None;
    for item in items {
        let v = score(&item);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, item));
        }
    }
    best.map(|(_, t)| t)
}

fn terminal_mismatch<U: Copy + Send + Sync + 'static>(
    phi: &CylindricalValueFunction,
    cost: &RunningCost<U>,
    eval: &EvalBox,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for m in &eval.scenarios {
        let frame = LawFrame::new(phi, eval.horizon, m)?;
        let k = phi.tests().len();
        for &x in &eval.x_points {
            let v = phi.outer().value(eval.horizon, x, &frame.z[..k]);
            let g = cost.terminal(x, &frame.view);
            let gap = (v - g).abs();
            if !gap.is_finite() {
                return Err(Error::NumericalOverflow {
                    location: format!("terminal check at x = {x}"),
                });
            }
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Checks `sup_u {f + G_u phi} = 0` at every point of the box and
/// `phi(T, ., .) = g`. The supremum is the maximum over `controls`, ties
/// going to the lowest index. Law-side pairings are computed once per
/// `(s, scenario, u)` and reused across `x`.
pub fn hjb_residual<U>(
    phi: &CylindricalValueFunction,
    cost: &RunningCost<U>,
    model: &CoefficientModel<U>,
    nu: &JumpMeasure,
    controls: &ControlGrid<U>,
    eval: &EvalBox,
    tol: f64,
) -> Result<HjbReport<U>>
where
    U: Copy + Send + Sync + 'static,
{
    let k = phi.tests().len();
    let per_frame = eval
        .frames()
        .into_par_iter()
        .map(|(i, sc)| {
            let s = eval.s_points[i];
            let frame = LawFrame::new(phi, s, &eval.scenarios[sc])?;
            let duals = controls
                .values()
                .iter()
                .map(|&u| frame.dual_pairings(phi, model, nu, u))
                .collect::<Result<Vec<[f64; MAX_PAIRINGS]>>>()?;
            let mut rows = Vec::with_capacity(eval.x_points.len());
            for &x in &eval.x_points {
                let d = phi.derivatives_at(s, x, &frame.z[..k])?;
                let mut best: Option<(f64, usize)> = None;
                for (c, (&u, dual)) in controls.values().iter().zip(&duals).enumerate() {
                    let v = cost.running(s, x, &frame.view, u)
                        + frame.generator(phi, model, nu, x, &d, dual, u)?;
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, c));
                    }
                }
                let (value, c) = best.expect("control grid is non-empty");
                rows.push((value, c, WorstPoint { s, x, scenario: sc }));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let (residual, c, worst_point) =
        worst_of(per_frame.into_iter().flatten(), |r| r.0.abs()).expect("box is non-empty");
    let terminal = terminal_mismatch(phi, cost, eval)?;
    let max_residual = residual.abs();
    Ok(HjbReport {
        max_residual,
        argmax_control: controls.values()[c],
        worst_point,
        terminal_mismatch: terminal,
        pass: max_residual <= tol && terminal <= tol,
    })
}

/// Worst violation of one pointwise inequality over the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    /// Amount by which the condition is violated (0 when it holds).
    pub max_violation: f64,
    pub worst_point: WorstPoint,
    /// The deviating control at the worst point, if one is involved.
    pub control: Option<f64>,
    pub pass: bool,
}

impl ConditionReport {
    fn from_rows(rows: &[(f64, Option<f64>, WorstPoint)], tol: f64) -> Self {
        let (v, control, worst_point) = worst_of(rows.iter().copied(), |r| r.0).expect("non-empty");
        let max_violation = v.max(0.0);
        Self {
            max_violation,
            worst_point,
            control,
            pass: max_violation <= tol,
        }
    }
}

/// Outcome of [`hjbi_zero_sum_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbiReport {
    /// `G_{u1, u2^} phi + f <= 0` for every `u1`.
    pub condition_i: ConditionReport,
    /// `G_{u1^, u2} phi + f >= 0` for every `u2`.
    pub condition_ii: ConditionReport,
    /// `G_{u1^, u2^} phi + f = 0`.
    pub condition_iii: ConditionReport,
    pub terminal_mismatch: f64,
    pub pass: bool,
}

/// Per-player outcome of [`nash_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlayerReport {
    /// Largest gain from a unilateral deviation on the grid.
    pub deviation: ConditionReport,
    /// `|G_{u^} phi_i + f_i(u^)|`.
    pub equilibrium: ConditionReport,
    pub terminal_mismatch: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashReport {
    pub player1: PlayerReport,
    pub player2: PlayerReport,
    pub pass: bool,
}

type Pair = (f64, f64);

/// `f + G_u phi` for a two-player control, with the law-side pairings
/// computed on the fly (the candidate feedback makes them depend on `x`).
#[allow(clippy::too_many_arguments)]
fn game_objective<M: crate::measures::Law>(
    phi: &CylindricalValueFunction,
    cost: &RunningCost<Pair>,
    model: &CoefficientModel<Pair>,
    nu: &JumpMeasure,
    frame: &LawFrame<'_, M>,
    x: f64,
    d: &super::OuterDerivatives,
    u: Pair,
) -> Result<f64> {
    let dual = frame.dual_pairings(phi, model, nu, u)?;
    Ok(cost.running(frame.s, x, &frame.view, u)
        + frame.generator(phi, model, nu, x, d, &dual, u)?)
}

/// Rows `(violation, control, point)` for each condition, evaluated on the
/// whole box in parallel and merged in box order.
fn game_rows<F, R>(eval: &EvalBox, per_point: F) -> Result<Vec<R>>
where
    F: Fn(usize, f64, f64) -> Result<R> + Sync,
    R: Send,
{
    let frames = eval.frames();
    let nested = frames
        .into_par_iter()
        .map(|(i, sc)| {
            eval.x_points
                .iter()
                .map(|&x| per_point(sc, eval.s_points[i], x))
                .collect::<Result<Vec<R>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Verifies the saddle-point conditions (i)-(iii) of the zero-sum HJBI
/// equation for the candidate feedback pair, plus the terminal condition.
#[allow(clippy::too_many_arguments)]
pub fn hjbi_zero_sum_check(
    phi: &CylindricalValueFunction,
    cost: &RunningCost<Pair>,
    model: &CoefficientModel<Pair>,
    nu: &JumpMeasure,
    u1_grid: &ControlGrid<f64>,
    u2_grid: &ControlGrid<f64>,
    candidate: impl Fn(f64, f64, &LawView) -> Pair + Sync,
    eval: &EvalBox,
    tol: f64,
) -> Result<HjbiReport> {
    let k = phi.tests().len();
    let rows = game_rows(eval, |sc, s, x| {
        let frame = LawFrame::new(phi, s, &eval.scenarios[sc])?;
        let d = phi.derivatives_at(s, x, &frame.z[..k])?;
        let (h1, h2) = candidate(s, x, &frame.view);
        let point = WorstPoint { s, x, scenario: sc };
        let obj = |u| game_objective(phi, cost, model, nu, &frame, x, &d, u);

        let mut first = (f64::NEG_INFINITY, None);
        for &u1 in u1_grid.values() {
            let v = obj((u1, h2))?;
            if v > first.0 {
                first = (v, Some(u1));
            }
        }
        let mut second = (f64::NEG_INFINITY, None);
        for &u2 in u2_grid.values() {
            let v = -obj((h1, u2))?;
            if v > second.0 {
                second = (v, Some(u2));
            }
        }
        let third = obj((h1, h2))?.abs();
        Ok([
            (first.0, first.1, point),
            (second.0, second.1, point),
            (third, None, point),
        ])
    })?;
    let column = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
    let condition_i = ConditionReport::from_rows(&column(0), tol);
    let condition_ii = ConditionReport::from_rows(&column(1), tol);
    let condition_iii = ConditionReport::from_rows(&column(2), tol);
    let terminal = terminal_mismatch(phi, cost, eval)?;
    Ok(HjbiReport {
        pass: condition_i.pass && condition_ii.pass && condition_iii.pass && terminal <= tol,
        condition_i,
        condition_ii,
        condition_iii,
        terminal_mismatch: terminal,
    })
}

/// Verifies that neither player gains from a unilateral deviation on its
/// control grid and that both HJB equations hold with equality at the
/// candidate pair, plus both terminal conditions.
#[allow(clippy::too_many_arguments)]
pub fn nash_check(
    phi1: &CylindricalValueFunction,
    phi2: &CylindricalValueFunction,
    cost1: &RunningCost<Pair>,
    cost2: &RunningCost<Pair>,
    model: &CoefficientModel<Pair>,
    nu: &JumpMeasure,
    u1_grid: &ControlGrid<f64>,
    u2_grid: &ControlGrid<f64>,
    candidate: impl Fn(f64, f64, &LawView) -> Pair + Sync,
    eval: &EvalBox,
    tol: f64,
) -> Result<NashReport> {
    let player = |phi: &CylindricalValueFunction,
                  cost: &RunningCost<Pair>,
                  grid: &ControlGrid<f64>,
                  first: bool|
     -> Result<PlayerReport> {
        let k = phi.tests().len();
        let rows = game_rows(eval, |sc, s, x| {
            let frame = LawFrame::new(phi, s, &eval.scenarios[sc])?;
            let d = phi.derivatives_at(s, x, &frame.z[..k])?;
            let hat = candidate(s, x, &frame.view);
            let point = WorstPoint { s, x, scenario: sc };
            let at_hat = game_objective(phi, cost, model, nu, &frame, x, &d, hat)?;
            let mut gain = (f64::NEG_INFINITY, None);
            for &u in grid.values() {
                let pair = if first { (u, hat.1) } else { (hat.0, u) };
                let v = game_objective(phi, cost, model, nu, &frame, x, &d, pair)? - at_hat;
                if v > gain.0 {
                    gain = (v, Some(u));
                }
            }
            Ok([(gain.0, gain.1, point), (at_hat.abs(), None, point)])
        })?;
        let deviation =
            ConditionReport::from_rows(&rows.iter().map(|r| r[0]).collect::<Vec<_>>(), tol);
        let equilibrium =
            ConditionReport::from_rows(&rows.iter().map(|r| r[1]).collect::<Vec<_>>(), tol);
        let terminal = terminal_mismatch(phi, cost, eval)?;
        Ok(PlayerReport {
            pass: deviation.pass && equilibrium.pass && terminal <= tol,
            deviation,
            equilibrium,
            terminal_mismatch: terminal,
        })
    };
    let player1 = player(phi1, cost1, u1_grid, true)?;
    let player2 = player(phi2, cost2, u2_grid, false)?;
    Ok(NashReport {
        pass: player1.pass && player2.pass,
        player1,
        player2,
    })
}
