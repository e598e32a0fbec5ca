//! Monte Carlo evaluation of the density through its Feynman-Kac
//! representation
//!
//! ```text
//! m(t, x) = E^x[ exp(int_0^t a ds) m0(Y_t) ],
//! dY = b ds + c dB - int gamma dN~,   Y_0 = x,
//! ```
//!
//! with `a`, `b`, `c` from [`abc_coefficients`]. Coefficients are evaluated
//! along a frozen law trajectory supplied by the caller, so `Y` is an
//! ordinary jump diffusion. Since the density equation runs forward in time,
//! the auxiliary path reads the coefficients at the reversed time `t - s`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::model::{abc_coefficients, CoefficientModel, ControlPolicy};
use crate::error::{invalid, Error, Result};
use crate::jumps::{JumpMeasure, JumpSampler};
use crate::measures::{GridDensity, Law, LawView};
use crate::rng::{stream, StreamDomain};

/// Largest `|a|` accepted by the boundedness probe.
const POTENTIAL_BOUND: f64 = 1e6;

/// Law views at increasing times, linearly interpolated in between.
#[derive(Debug, Clone, PartialEq)]
pub struct LawTrajectory {
    times: Vec<f64>,
    views: Vec<LawView>,
}

impl LawTrajectory {
    pub fn new(times: Vec<f64>, views: Vec<LawView>) -> Result<Self> {
        if times.is_empty() || times.len() != views.len() {
            return Err(invalid("times", "need one law view per time, at least one"));
        }
        if times
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(invalid("times", "times must be strictly increasing"));
        }
        Ok(Self { times, views })
    }

    /// The same law on `[0, horizon]`.
    pub fn constant(view: LawView, horizon: f64) -> Result<Self> {
        if horizon > 0.0 {
            Self::new(vec![0.0, horizon], vec![view, view])
        } else {
            Self::new(vec![0.0], vec![view])
        }
    }

    pub fn from_densities(times: &[f64], densities: &[GridDensity]) -> Result<Self> {
        Self::new(times.to_vec(), densities.iter().map(Law::view).collect())
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn view_at(&self, t: f64) -> Result<LawView> {
        let eps = 1e-9 * (1.0 + self.end().abs());
        if !(t >= self.start() - eps && t <= self.end() + eps) {
            return Err(Error::Domain(format!(
                "time {t} is outside the law trajectory [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return Ok(self.views[0]);
        }
        if k == self.times.len() {
            return Ok(self.views[k - 1]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        Ok(self.views[k - 1].lerp(&self.views[k], (t - t0) / (t1 - t0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeynmanKacConfig {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Step for x-derivatives in `a` and `b`; defaults to the grid spacing
    /// of `m0`.
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeynmanKacEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimates `m(t, x)` by simulating `config.paths` auxiliary paths.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_density(
    model: &CoefficientModel,
    nu: &JumpMeasure,
    m0: &GridDensity,
    law: &LawTrajectory,
    policy: &ControlPolicy,
    x: f64,
    t: f64,
    config: &FeynmanKacConfig,
) -> Result<FeynmanKacEstimate> {
    if !x.is_finite() {
        return Err(invalid("x", "must be finite"));
    }
    if t < 0.0 || t > law.end() + 1e-9 * (1.0 + law.end()) || t < law.start() {
        return Err(Error::Domain(format!(
            "time {t} is outside the frozen-law horizon [{}, {}]",
            law.start(),
            law.end()
        )));
    }
    if t == 0.0 {
        return Ok(FeynmanKacEstimate {
            estimate: m0.value_at(x),
            std_error: 0.0,
        });
    }
    if config.paths < 2 {
        return Err(invalid(
            "paths",
            "need at least two paths for a standard error",
        ));
    }
    if !(config.dt.is_finite() && config.dt > 0.0) {
        return Err(invalid("dt", "time step must be positive"));
    }
    let h = config.fd_step.unwrap_or(m0.grid().dx());
    let steps = (t / config.dt).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    let sampler = JumpSampler::new(nu, dt)?;

    // Forward times read by reverse step k, and the law there.
    let times: Vec<f64> = (0..steps).map(|k| t - k as f64 * dt).collect();
    let views = times
        .iter()
        .map(|&s| law.view_at(s))
        .collect::<Result<Vec<_>>>()?;
    probe_potential(model, policy, m0, &times, &views, h)?;

    let sqrt_dt = dt.sqrt();
    let samples: Vec<Result<f64>> = (0..config.paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(config.seed, StreamDomain::FeynmanKac, p as u64);
            let mut y = x;
            let mut log_weight = 0.0;
            for (s, view) in times.iter().zip(&views) {
                let u = policy.evaluate(*s, y, view)?;
                let abc = abc_coefficients(model, *s, y, view, u, h)?;
                log_weight += abc.a * dt;
                let z: f64 = rng.sample(StandardNormal);
                let mut jump = 0.0;
                let mut compensator = 0.0;
                if sampler.is_active() {
                    compensator = nu.integral(|zeta| model.gamma(*s, view, u, zeta))?;
                    sampler.for_each_mark(&mut rng, |zeta| jump += model.gamma(*s, view, u, zeta));
                }
                y += abc.b * dt + abc.c * sqrt_dt * z - jump + compensator * dt;
                if !y.is_finite() {
                    return Err(Error::Divergence {
                        step: 0,
                        particle: p,
                        value: y.abs(),
                    });
                }
            }
            Ok(log_weight.exp() * m0.value_at(y))
        })
        .collect();
    let values = samples.into_iter().collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(FeynmanKacEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    })
}

/// Checks that the potential `a` stays bounded on the grid of `m0` at the
/// first and last time of the path.
fn probe_potential(
    model: &CoefficientModel,
    policy: &ControlPolicy,
    m0: &GridDensity,
    times: &[f64],
    views: &[LawView],
    h: f64,
) -> Result<()> {
    let stride = (m0.grid().len() / 64).max(1);
    for k in [0, times.len() - 1] {
        for i in (0..m0.grid().len()).step_by(stride) {
            let y = m0.grid().x(i);
            let u = policy.evaluate(times[k], y, &views[k])?;
            let abc = abc_coefficients(model, times[k], y, &views[k], u, h)?;
            if abc.a.abs() > POTENTIAL_BOUND {
                return Err(invalid(
                    "model",
                    format!("potential a = {} at x = {y} is not bounded", abc.a),
                ));
            }
        }
    }
    Ok(())
}
