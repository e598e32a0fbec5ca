//! Log-utility consumption from a mean-field cash flow
//!
//! ```text
//! dX = (rho(t) - c(t)) E[X] dt + sigma0 E[X] dB + int gamma0 E[X] N~(dt, dzeta),
//! J(c) = int_0^T ln(c(t) E[X(t)]) dt + terminal utility of E[X(T)],
//! ```
//!
//! solved by `phi = k0(s) + k1(s) ln <m, q>` with `k1(s) = theta + T - s`
//! and `c^(s) = 1 / k1(s)`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::dynamics::{CoefficientModel, ControlPolicy};
use crate::error::{invalid, Error, Result};
use crate::hjb::{CylindricalValueFunction, OuterDerivatives, MAX_PAIRINGS};
use crate::measures::{LawView, TestPolynomial};

type Rate = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// How the terminal mean `M(T) = E[X(T)]` enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalUtility {
    /// `theta ln M(T)`, the terminal value of the log ansatz.
    #[default]
    Logarithmic,
    /// `theta M(T)`.
    Linear,
}

#[derive(Clone)]
pub struct ConsumptionSolution {
    theta: f64,
    horizon: f64,
    rho: Rate,
    quad_dt: f64,
}

impl fmt::Debug for ConsumptionSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConsumptionSolution")
            .field("theta", &self.theta)
            .field("horizon", &self.horizon)
            .field("quad_dt", &self.quad_dt)
            .finish_non_exhaustive()
    }
}

pub fn consumption_solution(
    theta: f64,
    horizon: f64,
    rho: impl Fn(f64) -> f64 + Send + Sync + 'static,
    quad_dt: f64,
) -> Result<ConsumptionSolution> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(invalid("theta", "must be positive"));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid("horizon", "must be positive"));
    }
    if !(quad_dt.is_finite() && quad_dt > 0.0) {
        return Err(invalid("quad_dt", "must be positive"));
    }
    Ok(ConsumptionSolution {
        theta,
        horizon,
        rho: Arc::new(rho),
        quad_dt,
    })
}

/// Composite Simpson rule on `[a, b]` with an even number of panels no
/// wider than `h`.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, h: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut n = ((b - a) / h).ceil().max(2.0) as usize;
    n += n % 2;
    let step = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * step);
    }
    acc * step / 3.0
}

impl ConsumptionSolution {
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn rho(&self, t: f64) -> f64 {
        (self.rho)(t)
    }

    /// `k1(s) = theta + T - s`.
    pub fn k1(&self, s: f64) -> f64 {
        self.theta + self.horizon - s
    }

    /// `k0(s) = -int_s^T (1 + ln k1 - rho k1) dr`; exactly 0 at `T`.
    pub fn k0(&self, s: f64) -> f64 {
        -simpson(
            |r| 1.0 + self.k1(r).ln() - self.rho(r) * self.k1(r),
            s,
            self.horizon,
            self.quad_dt,
        )
    }

    /// `k0'(s) = 1 + ln k1(s) - rho(s) k1(s)`.
    pub fn dk0(&self, s: f64) -> f64 {
        1.0 + self.k1(s).ln() - self.rho(s) * self.k1(s)
    }

    /// `c^(s) = 1 / k1(s)`.
    pub fn c_hat(&self, s: f64) -> f64 {
        1.0 / self.k1(s)
    }

    /// Writes `s,k0,k1,c_hat` at `n + 1` equally spaced times.
    pub fn write_csv<W: Write>(&self, writer: W, n: usize) -> Result<()> {
        let n = n.max(1);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "k0", "k1", "c_hat"])?;
        for i in 0..=n {
            let s = if i == n {
                self.horizon
            } else {
                self.horizon * i as f64 / n as f64
            };
            w.write_record([
                s.to_string(),
                self.k0(s).to_string(),
                self.k1(s).to_string(),
                self.c_hat(s).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The deterministic consumption rate `c(t) = 1 / k1(t)`.
pub fn consumption_policy(sol: &ConsumptionSolution) -> ControlPolicy {
    let sol = sol.clone();
    ControlPolicy::unbounded(move |t, _, _| {
        let end = sol.horizon;
        if !(t >= -1e-12 && t <= end * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("time {t} is outside [0, {end}]")));
        }
        Ok(sol.c_hat(t))
    })
}

/// `phi(s, x, m) = k0(s) + k1(s) ln <m, q>`.
pub fn consumption_value(sol: &ConsumptionSolution) -> CylindricalValueFunction {
    let sol = sol.clone();
    CylindricalValueFunction::analytic(vec![TestPolynomial::identity()], move |s, _, z| {
        let (k1, z) = (sol.k1(s), z[0]);
        let mut dz = [0.0; MAX_PAIRINGS];
        dz[0] = k1 / z;
        OuterDerivatives {
            value: sol.k0(s) + k1 * z.ln(),
            ds: sol.dk0(s) - z.ln(),
            dx: 0.0,
            dxx: 0.0,
            dz,
        }
    })
    .expect("one pairing")
}

/// `J(c)` for a deterministic rate `c`, through the mean equation
/// `M' = (rho - c) M`, `M(0) = x0`: RK4 on `y1 = ln M` and the running
/// integral `y2' = ln c + y1`.
pub fn consumption_objective(
    sol: &ConsumptionSolution,
    c: impl Fn(f64) -> f64,
    x0: f64,
    quad_dt: f64,
    terminal: TerminalUtility,
) -> Result<f64> {
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(Error::Domain(format!("initial mean {x0} must be positive")));
    }
    if !(quad_dt.is_finite() && quad_dt > 0.0) {
        return Err(invalid("quad_dt", "must be positive"));
    }
    let n = (sol.horizon / quad_dt).ceil().max(1.0) as usize;
    let h = sol.horizon / n as f64;
    let rhs = |t: f64, y: [f64; 2]| [sol.rho(t) - c(t), c(t).ln() + y[0]];
    let mut y = [x0.ln(), 0.0];
    for i in 0..n {
        let t = i as f64 * h;
        let d1 = rhs(t, y);
        let d2 = rhs(
            t + 0.5 * h,
            [y[0] + 0.5 * h * d1[0], y[1] + 0.5 * h * d1[1]],
        );
        let d3 = rhs(
            t + 0.5 * h,
            [y[0] + 0.5 * h * d2[0], y[1] + 0.5 * h * d2[1]],
        );
        let d4 = rhs(t + h, [y[0] + h * d3[0], y[1] + h * d3[1]]);
        for j in 0..2 {
            y[j] += h / 6.0 * (d1[j] + 2.0 * d2[j] + 2.0 * d3[j] + d4[j]);
        }
    }
    let tail = match terminal {
        TerminalUtility::Logarithmic => sol.theta * y[0],
        TerminalUtility::Linear => sol.theta * y[0].exp(),
    };
    let out = y[1] + tail;
    if !out.is_finite() {
        return Err(Error::NumericalOverflow {
            location: "consumption objective".into(),
        });
    }
    Ok(out)
}

/// `(phi(0, x0, m0), J(c^))` with the logarithmic terminal utility.
pub fn consumption_value_and_objective(
    sol: &ConsumptionSolution,
    x0: f64,
    quad_dt: f64,
) -> Result<(f64, f64)> {
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(Error::Domain(format!("initial mean {x0} must be positive")));
    }
    let value = sol.k0(0.0) + sol.k1(0.0) * x0.ln();
    let objective = consumption_objective(
        sol,
        |t| sol.c_hat(t),
        x0,
        quad_dt,
        TerminalUtility::Logarithmic,
    )?;
    Ok((value, objective))
}

/// `alpha = (rho(t) - c) <m, q>`, `beta = sigma0 <m, q>`,
/// `gamma = zeta <m, q>`.
pub fn consumption_model(sol: &ConsumptionSolution, sigma0: f64) -> Result<CoefficientModel> {
    if !sigma0.is_finite() {
        return Err(invalid("sigma0", "must be finite"));
    }
    let rho = Arc::clone(&sol.rho);
    CoefficientModel::new(
        move |t, _, law: &LawView, c| (rho(t) - c) * law.mean(),
        move |_, _, law: &LawView, _| sigma0 * law.mean(),
        |_, law: &LawView, _, zeta| zeta * law.mean(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{hjb_residual, ControlGrid, EvalBox, RunningCost};
    use crate::jumps::JumpMeasure;
    use crate::measures::{GridDensity, GridSpec};

    fn unit() -> ConsumptionSolution {
        consumption_solution(1.0, 1.0, |_| 0.0, 1e-4).unwrap()
    }

    #[test]
    fn closed_form_coefficients() {
        let sol = unit();
        assert_eq!(sol.k1(0.0), 2.0);
        assert_eq!(sol.k1(1.0), 1.0);
        assert_eq!(sol.k0(1.0), 0.0);
        assert!((sol.k0(0.0) + 2.0 * 2f64.ln()).abs() < 1e-8);
        assert_eq!(sol.c_hat(0.0), 0.5);
        assert_eq!(sol.c_hat(1.0), 1.0);
    }

    #[test]
    fn policy_increases_and_vanishes_for_large_theta() {
        let sol = unit();
        let p = consumption_policy(&sol);
        let law = LawView::point_mass(1.0);
        let mut prev = 0.0;
        for i in 0..=10 {
            let c = p.evaluate(i as f64 / 10.0, 0.0, &law).unwrap();
            assert!(c > prev);
            prev = c;
        }
        assert!(p.evaluate(1.5, 0.0, &law).is_err());
        let rich = consumption_solution(1e9, 1.0, |_| 0.0, 1e-2).unwrap();
        assert!(rich.c_hat(0.5) < 1e-8);
    }

    #[test]
    fn value_equals_objective() {
        let sol = unit();
        let (v, j) = consumption_value_and_objective(&sol, 1.0, 1e-4).unwrap();
        assert!((v + 2.0 * 2f64.ln()).abs() < 1e-8);
        assert!((v - j).abs() < 1e-6, "{v} vs {j}");
        assert!(consumption_value_and_objective(&sol, 0.0, 1e-4).is_err());

        let sol = consumption_solution(0.7, 2.0, |t| 0.1 + 0.05 * t, 1e-4).unwrap();
        let (v, j) = consumption_value_and_objective(&sol, 1.8, 1e-4).unwrap();
        assert!((v - j).abs() < 1e-6, "{v} vs {j}");
    }

    #[test]
    fn perturbed_consumption_is_worse() {
        let sol = unit();
        let best = consumption_objective(
            &sol,
            |t| sol.c_hat(t),
            1.0,
            1e-4,
            TerminalUtility::Logarithmic,
        )
        .unwrap();
        for f in [0.8, 1.2] {
            let j = consumption_objective(
                &sol,
                |t| f * sol.c_hat(t),
                1.0,
                1e-4,
                TerminalUtility::Logarithmic,
            )
            .unwrap();
            assert!(j < best);
        }
    }

    #[test]
    fn linear_terminal_utility() {
        // rho = 0, c = 1/(2 - t): M(t) = (2 - t)/2, so J = -ln 2 + 1/2.
        let sol = unit();
        let j = consumption_objective(&sol, |t| sol.c_hat(t), 1.0, 1e-4, TerminalUtility::Linear)
            .unwrap();
        assert!((j - (0.5 - 2f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn candidate_solves_its_hjb_equation() {
        let sol = unit();
        let phi = consumption_value(&sol);
        let theta = sol.theta();
        let cost = RunningCost::new(
            |_, _, law: &LawView, c: f64| (c * law.mean()).ln(),
            move |_, law: &LawView| theta * law.mean().ln(),
        );
        let model = consumption_model(&sol, 0.3).unwrap();
        let nu = JumpMeasure::single(0.2, 1.0).unwrap();
        let grid = GridSpec::new(-4.0, 8.0, 0.02).unwrap();
        let scenarios = vec![
            GridDensity::normal(grid, 1.0, 0.3).unwrap(),
            GridDensity::normal(grid, 2.0, 0.5).unwrap(),
        ];
        let eval = EvalBox::uniform(1.0, 6, 1.0, 3, scenarios).unwrap();
        let controls = ControlGrid::uniform(0.4, 1.1, 701).unwrap();
        let report = hjb_residual(&phi, &cost, &model, &nu, &controls, &eval, 1e-3).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        unit().write_csv(&mut buf, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,k0,k1,c_hat\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
