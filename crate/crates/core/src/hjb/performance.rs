//! Monte Carlo estimate of the performance functional
//! `J_u = E[int_0^T f(t, X_t, m_t, u_t) dt + g(X_T, m_T)]`.

use rayon::prelude::*;

use super::RunningCost;
use crate::dynamics::{
    time_grid, CoefficientModel, ControlPolicy, ParticleSystem, SimulationConfig,
};
use crate::error::{invalid, Error, Result};
use crate::jumps::JumpMeasure;
use crate::measures::law_view_of_positions;
use crate::rng::{derive_seed, StreamDomain};

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// The estimate of each independent particle system.
    pub replicates: Vec<f64>,
}

/// Runs `replicates` independent particle systems of `config.particles`
/// particles each and averages their left-point Riemann sums of the running
/// reward plus the terminal reward. The standard error is taken across
/// replicates; with a single replicate it falls back to the spread across
/// particles.
pub fn estimate_performance(
    model: &CoefficientModel,
    policy: &ControlPolicy,
    nu: &JumpMeasure,
    cost: &RunningCost,
    config: &SimulationConfig,
    replicates: usize,
) -> Result<PerformanceEstimate> {
    if replicates == 0 {
        return Err(invalid("replicates", "need at least one replicate"));
    }
    let (steps, dt) = time_grid(config.dt, config.horizon)?;
    let mut values = Vec::with_capacity(replicates);
    let mut particle_se = 0.0;
    for r in 0..replicates {
        let seed = derive_seed(config.seed, StreamDomain::Replicate, r as u64);
        let mut system =
            ParticleSystem::new(model, policy, nu, config.x0, config.particles, dt, seed)?;
        let mut acc = vec![0.0; config.particles];
        for k in 0..steps {
            let t = k as f64 * dt;
            let law = system.law(k)?;
            let before = system.positions().to_vec();
            let controls = system.step(k, t, &law)?;
            acc.par_iter_mut()
                .zip(before.par_iter().zip(&controls))
                .for_each(|(a, (&x, &u))| *a += cost.running(t, x, &law, u) * dt);
        }
        let law = law_view_of_positions(system.positions());
        acc.par_iter_mut()
            .zip(system.positions().par_iter())
            .for_each(|(a, &x)| *a += cost.terminal(x, &law));
        if let Some(j) = acc.iter().position(|a| !a.is_finite()) {
            return Err(Error::NumericalOverflow {
                location: format!("performance of particle {j} in replicate {r}"),
            });
        }
        let (mean, se) = mean_and_se(&acc);
        values.push(mean);
        particle_se = se;
    }
    let (estimate, std_error) = if replicates > 1 {
        mean_and_se(&values)
    } else {
        (values[0], particle_se)
    };
    Ok(PerformanceEstimate {
        estimate,
        std_error,
        replicates: values,
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
