//! The density equation `dm/dt = A*_u m` on a uniform grid, where
//!
//! ```text
//! A*_u m = -(alpha m)' + (beta^2 m)''/2 + int { m(. - gamma) - m + gamma m' } nu(dzeta)
//! ```
//!
//! and a Fourier-side consistency check of simulated particle laws against
//! the same operator.
//!
//! Spatial derivatives are second-order central differences; the density is
//! zero outside the grid (ghost values are zero), so nothing flows in across
//! the boundary.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{time_grid, CoefficientModel, ControlPolicy, SimulationResult};
use crate::error::{invalid, Error, Result};
use crate::jumps::JumpMeasure;
use crate::measures::{
    shifted_values, trapezoid, EmpiricalEnsemble, GridDensity, GridFunction, GridSpec, Law, LawView,
};

/// Undershoots below this abort [`solve_fp`].
pub const NEGATIVE_ABORT: f64 = -1e-8;

/// Largest tolerated `|int m(t) - 1|` over a solve.
pub const MASS_DRIFT_LIMIT: f64 = 1e-2;

/// `A*_u m` with a single control value for the whole population.
pub fn apply_adjoint(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    m: &GridDensity,
    t: f64,
    u: f64,
) -> Result<GridFunction> {
    let law = m.view();
    let controls = vec![u; m.grid().len()];
    let values = adjoint_values(model, nu, m.grid(), m.values(), t, &law, &controls)?;
    GridFunction::new(*m.grid(), values)
}

#[inline]
fn ghost(values: &[f64], i: isize) -> f64 {
    if i < 0 || i as usize >= values.len() {
        0.0
    } else {
        values[i as usize]
    }
}

#[inline]
fn central_first(values: &[f64], i: usize, dx: f64) -> f64 {
    let i = i as isize;
    (ghost(values, i + 1) - ghost(values, i - 1)) / (2.0 * dx)
}

#[inline]
fn central_second(values: &[f64], i: usize, dx: f64) -> f64 {
    let i = i as isize;
    let mid = ghost(values, i);
    ((ghost(values, i + 1) - mid) + (ghost(values, i - 1) - mid)) / (dx * dx)
}

/// Jump sizes `gamma(t, m, u, zeta_j)` per atom, required to be the same at
/// every grid point. With state-feedback controls a control-dependent jump
/// size would become state dependent, and the shifted density would no
/// longer be a translate.
fn uniform_jump_sizes(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    t: f64,
    law: &LawView,
    controls: &[f64],
) -> Result<Vec<f64>> {
    let mut sizes = Vec::with_capacity(nu.atoms().len());
    for atom in nu.atoms() {
        let g0 = model.gamma(t, law, controls[0], atom.zeta);
        if !g0.is_finite() {
            return Err(Error::NonFiniteCoefficient(format!(
                "gamma at t = {t}, zeta = {}",
                atom.zeta
            )));
        }
        let tol = 1e-12 * (1.0 + g0.abs());
        if let Some(i) = controls
            .iter()
            .position(|&u| (model.gamma(t, law, u, atom.zeta) - g0).abs() > tol)
        {
            return Err(Error::Domain(format!(
                "jump size varies across the grid (index {i}) through the feedback control"
            )));
        }
        sizes.push(g0);
    }
    Ok(sizes)
}

pub(crate) fn adjoint_values(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    grid: &GridSpec,
    m: &[f64],
    t: f64,
    law: &LawView,
    controls: &[f64],
) -> Result<Vec<f64>> {
    let dx = grid.dx();
    let coeffs: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.x(i);
            let a = model.alpha(t, x, law, controls[i]);
            let b = model.beta(t, x, law, controls[i]);
            (a, b * b)
        })
        .collect();
    if let Some(i) = coeffs
        .iter()
        .position(|(a, b2)| !(a.is_finite() && b2.is_finite()))
    {
        return Err(Error::NonFiniteCoefficient(format!(
            "alpha/beta at t = {t}, x = {}",
            grid.x(i)
        )));
    }
    let drift_flux: Vec<f64> = coeffs.iter().zip(m).map(|((a, _), m)| a * m).collect();
    let diffusion_flux: Vec<f64> = coeffs.iter().zip(m).map(|((_, b2), m)| b2 * m).collect();

    let mut out: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| -central_first(&drift_flux, i, dx) + 0.5 * central_second(&diffusion_flux, i, dx))
        .collect();

    if !nu.is_zero() {
        let sizes = uniform_jump_sizes(model, nu, t, law, controls)?;
        for (atom, &gamma) in nu.atoms().iter().zip(&sizes) {
            if gamma.abs() >= grid.width() {
                return Err(Error::Domain(format!(
                    "jump size {gamma} is not smaller than the grid width {}",
                    grid.width()
                )));
            }
            let shifted = shifted_values(m, dx, gamma);
            let w = atom.intensity;
            out.par_iter_mut().enumerate().for_each(|(i, o)| {
                *o += w * (shifted[i] - m[i] + gamma * central_first(m, i, dx));
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Keep every `record_every`-th density (the first and last are always
    /// kept).
    pub record_every: usize,
}

/// Densities at the recorded times plus per-step mass diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FpSolution {
    times: Vec<f64>,
    densities: Vec<GridDensity>,
    mass_drift: Vec<f64>,
    clipped_mass: f64,
    dt: f64,
}

impl FpSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn densities(&self) -> &[GridDensity] {
        &self.densities
    }

    pub fn final_density(&self) -> &GridDensity {
        self.densities.last().expect("initial density is recorded")
    }

    /// `|int m(t_k) - 1|` after every step.
    pub fn mass_drift(&self) -> &[f64] {
        &self.mass_drift
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.mass_drift.iter().copied().fold(0.0, f64::max)
    }

    /// Total mass removed by clipping small negative undershoots.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Writes `time,x,density` for every recorded density.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "x", "density"])?;
        for (t, m) in self.times.iter().zip(&self.densities) {
            for (x, v) in m.grid().points().zip(m.values()) {
                w.write_record([t.to_string(), x.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Explicit Euler time stepping `m_{k+1} = m_k + dt A*_u m_k`, with the
/// feedback control evaluated against the current density at each grid
/// point.
///
/// Each step checks `dt max(beta^2) <= dx^2`, `dt max|alpha| <= dx` and
/// `dt lambda <= 1`. Values below [`NEGATIVE_ABORT`] abort the solve; smaller
/// undershoots are clipped to zero and accounted in
/// [`FpSolution::clipped_mass`]. The density is never renormalized.
pub fn solve_fp(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    m0: &GridDensity,
    policy: &ControlPolicy,
    config: &FpConfig,
) -> Result<FpSolution> {
    let (steps, dt) = time_grid(config.dt, config.horizon)?;
    let record_every = config.record_every.max(1);
    let grid = *m0.grid();
    let lambda = nu.total_intensity();
    if dt * lambda > 1.0 {
        return Err(Error::Stability(format!(
            "dt * lambda = {} exceeds 1",
            dt * lambda
        )));
    }

    let mut m = m0.values().to_vec();
    let mut times = vec![0.0];
    let mut densities = vec![m0.clone()];
    let mut mass_drift = Vec::with_capacity(steps);
    let mut clipped_mass = 0.0;
    let tolerance = MASS_DRIFT_LIMIT.max(m0.tol_mass());

    for k in 0..steps {
        let t = k as f64 * dt;
        let current = GridDensity::from_trusted(grid, m.clone(), tolerance);
        let law = current.view();
        let controls = (0..grid.len())
            .into_par_iter()
            .map(|i| policy.evaluate(t, grid.x(i), &law))
            .collect::<Result<Vec<_>>>()?;
        check_stability(model, &grid, t, &law, &controls, dt)?;
        let rhs = adjoint_values(model, nu, &grid, &m, t, &law, &controls)?;

        let mut clipped = vec![0.0; m.len()];
        for (i, (mi, ri)) in m.iter_mut().zip(&rhs).enumerate() {
            let next = *mi + dt * ri;
            if next < NEGATIVE_ABORT {
                return Err(Error::NegativeDensity {
                    step: k + 1,
                    x: grid.x(i),
                    value: next,
                });
            }
            if next < 0.0 {
                clipped[i] = -next;
                *mi = 0.0;
            } else {
                *mi = next;
            }
        }
        clipped_mass += trapezoid(&grid, &clipped);
        let drift = (trapezoid(&grid, &m) - 1.0).abs();
        let time = (k + 1) as f64 * dt;
        if drift > MASS_DRIFT_LIMIT {
            return Err(Error::MassDrift {
                time,
                drift,
                limit: MASS_DRIFT_LIMIT,
            });
        }
        mass_drift.push(drift);
        if (k + 1) % record_every == 0 || k + 1 == steps {
            times.push(time);
            densities.push(GridDensity::from_trusted(grid, m.clone(), tolerance));
        }
    }
    Ok(FpSolution {
        times,
        densities,
        mass_drift,
        clipped_mass,
        dt,
    })
}

fn check_stability(
    model: &CoefficientModel,
    grid: &GridSpec,
    t: f64,
    law: &LawView,
    controls: &[f64],
    dt: f64,
) -> Result<()> {
    let dx = grid.dx();
    let (mut max_b2, mut max_a) = (0.0f64, 0.0f64);
    for (i, &u) in controls.iter().enumerate() {
        let x = grid.x(i);
        let b = model.beta(t, x, law, u);
        max_b2 = max_b2.max(b * b);
        max_a = max_a.max(model.alpha(t, x, law, u).abs());
    }
    if dt * max_b2 > dx * dx * (1.0 + 1e-12) {
        return Err(Error::Stability(format!(
            "dt = {dt} exceeds dx^2 / max(beta^2) = {}",
            dx * dx / max_b2
        )));
    }
    if dt * max_a > dx {
        return Err(Error::Stability(format!(
            "dt = {dt} exceeds dx / max|alpha| = {}",
            dx / max_a
        )));
    }
    Ok(())
}

/// Summary of a density solve against a reference solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub scenario: String,
    pub dx: f64,
    pub dt: f64,
    pub l1_error: Option<f64>,
    pub mass_drift: f64,
}

/// `A phi_y(x)` for `phi_y(x) = exp(-i y x)`:
/// `(-i y alpha - y^2 beta^2 / 2 + int {e^{-i y gamma} - 1 + i y gamma} dnu) e^{-i y x}`.
fn generator_of_exponential(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    t: f64,
    x: f64,
    law: &LawView,
    u: f64,
    y: f64,
) -> Complex64 {
    let a = model.alpha(t, x, law, u);
    let b = model.beta(t, x, law, u);
    let mut bracket = Complex64::new(-0.5 * y * y * b * b, -y * a);
    for atom in nu.atoms() {
        let g = model.gamma(t, law, u, atom.zeta);
        let (s, c) = (y * g).sin_cos();
        bracket += atom.intensity * Complex64::new(c - 1.0, y * g - s);
    }
    let (s, c) = (y * x).sin_cos();
    bracket * Complex64::new(c, -s)
}

/// Particle estimate of `L_t(y) = E[A phi_y(X_t)]`, the time derivative of
/// the characteristic function `E[exp(-i y X_t)]`.
pub fn characteristic_rhs(
    ensemble: &EmpiricalEnsemble,
    model: &CoefficientModel,
    nu: &JumpMeasure,
    t: f64,
    y: f64,
    u: f64,
) -> Complex64 {
    let law = ensemble.view();
    let sum: Complex64 = ensemble
        .positions()
        .iter()
        .map(|&x| generator_of_exponential(model, nu, t, x, &law, u, y))
        .sum();
    sum / ensemble.len() as f64
}

/// Worst window for one frequency in [`check_characteristic_evolution`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharacteristicRow {
    pub y: f64,
    pub time: f64,
    pub discrepancy: f64,
    pub std_error: f64,
}

impl CharacteristicRow {
    pub fn within(&self, slack: f64) -> bool {
        self.discrepancy <= 3.0 * self.std_error + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharacteristicReport {
    pub h: f64,
    pub rows: Vec<CharacteristicRow>,
    pub max_discrepancy: f64,
}

impl CharacteristicReport {
    /// Every frequency within its three-standard-error band plus `slack`.
    pub fn passes(&self, slack: f64) -> bool {
        self.rows.iter().all(|r| r.within(slack))
    }

    /// Writes `y,time,discrepancy,std_error`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["y", "time", "discrepancy", "std_error"])?;
        for r in &self.rows {
            w.write_record([
                r.y.to_string(),
                r.time.to_string(),
                r.discrepancy.to_string(),
                r.std_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares `(mu_{t+h}(y) - mu_t(y)) / h` with the trapezoidal average
/// `(L_t(y) + L_{t+h}(y)) / 2` over every window `[t, t+h]` of the
/// simulation. Both sides are averages over the same particles, so the
/// standard error is taken from the per-particle differences.
pub fn check_characteristic_evolution(
    simulation: &SimulationResult,
    model: &CoefficientModel,
    nu: &JumpMeasure,
    policy: &ControlPolicy,
    ys: &[f64],
    h: f64,
) -> Result<CharacteristicReport> {
    let dt = simulation.dt();
    if !(h.is_finite() && h >= dt * (1.0 - 1e-9)) {
        return Err(invalid(
            "h",
            format!("window {h} is shorter than the step {dt}"),
        ));
    }
    let stride = (h / dt).round() as usize;
    if ((stride as f64) * dt - h).abs() > 1e-9 * h {
        return Err(invalid(
            "h",
            format!("window {h} is not a multiple of the step {dt}"),
        ));
    }
    let ensembles = simulation.ensembles();
    if ensembles.len() <= stride {
        return Err(invalid("h", "simulation is shorter than one window"));
    }
    let times = simulation.times();
    let bases: Vec<usize> = (0..ensembles.len() - stride).step_by(stride).collect();

    // Controls applied by each particle at every time that enters a window.
    let mut needed: Vec<usize> = bases.iter().flat_map(|&b| [b, b + stride]).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut controls = vec![Vec::new(); ensembles.len()];
    let mut laws = vec![LawView::point_mass(0.0); ensembles.len()];
    for &k in &needed {
        let law = ensembles[k].view();
        controls[k] = ensembles[k]
            .positions()
            .iter()
            .map(|&x| policy.evaluate(times[k], x, &law))
            .collect::<Result<Vec<_>>>()?;
        laws[k] = law;
    }

    let rows: Vec<CharacteristicRow> = ys
        .par_iter()
        .map(|&y| {
            let mut worst: Option<CharacteristicRow> = None;
            for &b in &bases {
                let e = b + stride;
                let (xs0, xs1) = (ensembles[b].positions(), ensembles[e].positions());
                let n = xs0.len() as f64;
                let diffs: Vec<Complex64> = (0..xs0.len())
                    .map(|j| {
                        let phi0 = Complex64::from_polar(1.0, -y * xs0[j]);
                        let phi1 = Complex64::from_polar(1.0, -y * xs1[j]);
                        let l0 = generator_of_exponential(
                            model,
                            nu,
                            times[b],
                            xs0[j],
                            &laws[b],
                            controls[b][j],
                            y,
                        );
                        let l1 = generator_of_exponential(
                            model,
                            nu,
                            times[e],
                            xs1[j],
                            &laws[e],
                            controls[e][j],
                            y,
                        );
                        (phi1 - phi0) / h - 0.5 * (l0 + l1)
                    })
                    .collect();
                let mean: Complex64 = diffs.iter().sum::<Complex64>() / n;
                let var = if diffs.len() > 1 {
                    diffs.iter().map(|d| (d - mean).norm_sqr()).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                let row = CharacteristicRow {
                    y,
                    time: times[b],
                    discrepancy: mean.norm(),
                    std_error: (var / n).sqrt(),
                };
                let excess = |r: &CharacteristicRow| r.discrepancy - 3.0 * r.std_error;
                if worst.is_none_or(|w| excess(&row) > excess(&w)) {
                    worst = Some(row);
                }
            }
            worst.expect("at least one window")
        })
        .collect();
    let max_discrepancy = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
    Ok(CharacteristicReport {
        h,
        rows,
        max_discrepancy,
    })
}
