use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::model::{CoefficientModel, ControlPolicy};
use crate::error::{invalid, Error, Result};
use crate::jumps::{JumpMeasure, JumpSampler};
use crate::measures::{law_view_of_positions, EmpiricalEnsemble, LawView};
use crate::rng::{stream, StreamDomain};

/// Particles whose magnitude exceeds this are treated as diverged.
pub const DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub x0: f64,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
}

/// Number of steps and the exact step for a horizon that `dt` must divide.
pub(crate) fn time_grid(dt: f64, horizon: f64) -> Result<(usize, f64)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid("dt", "time step must be positive"));
    }
    if !(horizon.is_finite() && horizon >= dt * (1.0 - 1e-9)) {
        return Err(invalid(
            "horizon",
            format!("need 0 < dt <= T, got dt = {dt}, T = {horizon}"),
        ));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(invalid(
            "dt",
            format!("step {dt} does not divide the horizon {horizon}"),
        ));
    }
    Ok((steps as usize, horizon / steps))
}

/// Mean, minimum and maximum of the controls applied during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ControlSummary {
    fn of(controls: &[f64]) -> Self {
        Self {
            mean: controls.iter().sum::<f64>() / controls.len() as f64,
            min: controls.iter().copied().fold(f64::INFINITY, f64::min),
            max: controls.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Ensembles at every time `t_k = k dt`, `k = 0..=steps`, and a summary of
/// the controls applied during each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    times: Vec<f64>,
    ensembles: Vec<EmpiricalEnsemble>,
    controls: Vec<ControlSummary>,
    dt: f64,
}

impl SimulationResult {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ensembles(&self) -> &[EmpiricalEnsemble] {
        &self.ensembles
    }

    pub fn controls(&self) -> &[ControlSummary] {
        &self.controls
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn final_ensemble(&self) -> &EmpiricalEnsemble {
        self.ensembles
            .last()
            .expect("at least the initial ensemble")
    }

    /// Writes `step,time,mean,variance,min,max`.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "time", "mean", "variance", "min", "max"])?;
        for (k, (t, e)) in self.times.iter().zip(&self.ensembles).enumerate() {
            w.write_record([
                k.to_string(),
                t.to_string(),
                e.mean().to_string(),
                e.variance().to_string(),
                e.min().to_string(),
                e.max().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Full dump: `step,time,particle_index,position`.
    pub fn write_ensembles_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "time", "particle_index", "position"])?;
        for (k, (t, e)) in self.times.iter().zip(&self.ensembles).enumerate() {
            for (j, x) in e.positions().iter().enumerate() {
                w.write_record([k.to_string(), t.to_string(), j.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// N coupled particles advanced by Euler-Maruyama, each with its own
/// random stream.
pub(crate) struct ParticleSystem<'a> {
    model: &'a CoefficientModel,
    policy: &'a ControlPolicy,
    nu: &'a JumpMeasure,
    sampler: JumpSampler,
    positions: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
    dt: f64,
}

impl<'a> ParticleSystem<'a> {
    pub(crate) fn new(
        model: &'a CoefficientModel,
        policy: &'a ControlPolicy,
        nu: &'a JumpMeasure,
        x0: f64,
        particles: usize,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(invalid("particles", "need at least one particle"));
        }
        if !x0.is_finite() {
            return Err(invalid("x0", "initial state must be finite"));
        }
        Ok(Self {
            model,
            policy,
            nu,
            sampler: JumpSampler::new(nu, dt)?,
            positions: vec![x0; particles],
            rngs: (0..particles)
                .map(|j| stream(seed, StreamDomain::Particles, j as u64))
                .collect(),
            dt,
        })
    }

    pub(crate) fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Moments of the current empirical law, failing when they stop being
    /// finite (the first two moments must stay finite for admissibility).
    pub(crate) fn law(&self, step: usize) -> Result<LawView> {
        let law = law_view_of_positions(&self.positions);
        if law.moments()[..3].iter().any(|m| !m.is_finite()) {
            return Err(Error::NumericalOverflow {
                location: format!("empirical moments at step {step}"),
            });
        }
        Ok(law)
    }

    /// Advances every particle from `t` to `t + dt` against the frozen
    /// snapshot `law`; returns the control each particle applied.
    pub(crate) fn step(&mut self, step: usize, t: f64, law: &LawView) -> Result<Vec<f64>> {
        let (model, policy, nu, sampler, dt) =
            (self.model, self.policy, self.nu, &self.sampler, self.dt);
        let sqrt_dt = dt.sqrt();
        let outcomes: Vec<Result<f64>> = self
            .positions
            .par_iter_mut()
            .zip(self.rngs.par_iter_mut())
            .enumerate()
            .map(|(j, (x, rng))| {
                let u = policy.evaluate(t, *x, law)?;
                let a = model.alpha(t, *x, law, u);
                let b = model.beta(t, *x, law, u);
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::NonFiniteCoefficient(format!(
                        "particle {j} at step {step}: alpha = {a}, beta = {b}"
                    )));
                }
                let z: f64 = rng.sample(StandardNormal);
                let mut jump = 0.0;
                let mut compensator = 0.0;
                if sampler.is_active() {
                    compensator = nu.integral(|zeta| model.gamma(t, law, u, zeta))?;
                    sampler.for_each_mark(rng, |zeta| jump += model.gamma(t, law, u, zeta));
                }
                let next = *x + a * dt + b * sqrt_dt * z + jump - dt * compensator;
                if !next.is_finite() || next.abs() > DIVERGENCE_GUARD {
                    return Err(Error::Divergence {
                        step,
                        particle: j,
                        value: next.abs(),
                    });
                }
                *x = next;
                Ok(u)
            })
            .collect();
        outcomes.into_iter().collect()
    }
}

/// Interacting-particle Euler-Maruyama simulation of the controlled
/// McKean-Vlasov jump SDE
///
/// ```text
/// X_{k+1} = X_k + alpha dt + beta sqrt(dt) Z + sum_marks gamma(zeta) - dt int gamma dnu
/// ```
///
/// where the law seen by the coefficients is the empirical measure of the
/// same particles at the start of the step. Output is bit-identical for a
/// given configuration regardless of the rayon thread count.
pub fn simulate_particles(
    model: &CoefficientModel,
    policy: &ControlPolicy,
    nu: &JumpMeasure,
    config: &SimulationConfig,
) -> Result<SimulationResult> {
    let (steps, dt) = time_grid(config.dt, config.horizon)?;
    let mut system = ParticleSystem::new(
        model,
        policy,
        nu,
        config.x0,
        config.particles,
        dt,
        config.seed,
    )?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut ensembles = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    times.push(0.0);
    ensembles.push(EmpiricalEnsemble::new(system.positions().to_vec())?);
    for k in 0..steps {
        let t = k as f64 * dt;
        let law = system.law(k)?;
        let applied = system.step(k, t, &law)?;
        controls.push(ControlSummary::of(&applied));
        times.push((k + 1) as f64 * dt);
        ensembles.push(EmpiricalEnsemble::new(system.positions().to_vec())?);
    }
    Ok(SimulationResult {
        times,
        ensembles,
        controls,
        dt,
    })
}
