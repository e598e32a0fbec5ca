//! Linear-quadratic mean-field control
//!
//! ```text
//! dX = u dt + sigma E[X] dB + int gamma0(zeta) E[X] N~(dt, dzeta),
//! J(u) = E[-int_0^T u^2 / 2 dt - X(T)^2 / 2],
//! ```
//!
//! with the quadratic ansatz `phi = k1 x^2 + k2 x z + k3 z^2`, `z = E[X]`.

use std::io::Write;
use std::sync::Arc;

use crate::dynamics::{time_grid, CoefficientModel, ControlPolicy};
use crate::error::{invalid, Error, Result};
use crate::hjb::{CylindricalValueFunction, OuterDerivatives, RunningCost, MAX_PAIRINGS};
use crate::measures::{LawView, TestPolynomial};

/// Any `|k_i|` above this aborts [`riccati_solve`].
pub const BLOW_UP_GUARD: f64 = 1e8;

/// Which `k2` equation to integrate.
///
/// Substituting the optimal control into the HJB equation leaves the `x z`
/// coefficient `k2' + (2 k1 + k2)(k2 + 2 k3)`. The commonly quoted form
/// carries an extra factor 2 on the product; it coincides with the
/// consistent form only when `k2 + 2 k3 = 0`, e.g. for `sigma_eff = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiccatiForm {
    /// `k2' = -(2 k1 + k2)(k2 + 2 k3)`, the form that solves the HJB equation.
    #[default]
    Consistent,
    /// `k2' = -2 (2 k1 + k2)(k2 + 2 k3)`.
    AsPrinted,
}

/// `(k1', k2', k3')` at `k`, with `sigma_eff2 = sigma^2 + int gamma0^2 dnu`.
pub fn riccati_rhs(k: [f64; 3], sigma_eff2: f64, form: RiccatiForm) -> [f64; 3] {
    let [k1, k2, k3] = k;
    let a = 2.0 * k1 + k2;
    let b = k2 + 2.0 * k3;
    let c = match form {
        RiccatiForm::Consistent => 1.0,
        RiccatiForm::AsPrinted => 2.0,
    };
    [-0.5 * a * a, -c * a * b, -0.5 * b * b - k1 * sigma_eff2]
}

/// `k1, k2, k3` and their derivatives on an increasing grid of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiCurves {
    s: Vec<f64>,
    k: Vec<[f64; 3]>,
    dk: Vec<[f64; 3]>,
    sigma_eff2: f64,
}

/// Backward fixed-step RK4 from `k(T) = (-1/2, 0, 0)` for the consistent
/// system.
pub fn riccati_solve(
    sigma: f64,
    jump_second_moment: f64,
    horizon: f64,
    dt: f64,
) -> Result<RiccatiCurves> {
    riccati_solve_form(
        sigma,
        jump_second_moment,
        horizon,
        dt,
        RiccatiForm::Consistent,
    )
}

pub fn riccati_solve_form(
    sigma: f64,
    jump_second_moment: f64,
    horizon: f64,
    dt: f64,
    form: RiccatiForm,
) -> Result<RiccatiCurves> {
    if !sigma.is_finite() {
        return Err(invalid("sigma", "must be finite"));
    }
    if !(jump_second_moment.is_finite() && jump_second_moment >= 0.0) {
        return Err(invalid(
            "jump_second_moment",
            "must be finite and non-negative",
        ));
    }
    let (steps, dt) = time_grid(dt, horizon)?;
    let sigma_eff2 = sigma * sigma + jump_second_moment;
    let f = |k: [f64; 3]| riccati_rhs(k, sigma_eff2, form);
    let axpy =
        |k: [f64; 3], h: f64, d: [f64; 3]| [k[0] + h * d[0], k[1] + h * d[1], k[2] + h * d[2]];

    let mut k = vec![[0.0; 3]; steps + 1];
    k[steps] = [-0.5, 0.0, 0.0];
    let h = -dt;
    for n in (0..steps).rev() {
        let y = k[n + 1];
        let d1 = f(y);
        let d2 = f(axpy(y, 0.5 * h, d1));
        let d3 = f(axpy(y, 0.5 * h, d2));
        let d4 = f(axpy(y, h, d3));
        let next = [0, 1, 2].map(|i| y[i] + h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]));
        if next
            .iter()
            .any(|v| !v.is_finite() || v.abs() > BLOW_UP_GUARD)
        {
            return Err(Error::BlowUp {
                time: n as f64 * dt,
            });
        }
        k[n] = next;
    }
    let s = (0..=steps)
        .map(|n| if n == steps { horizon } else { n as f64 * dt })
        .collect();
    let dk = k.iter().map(|&v| f(v)).collect();
    Ok(RiccatiCurves {
        s,
        k,
        dk,
        sigma_eff2,
    })
}

impl RiccatiCurves {
    pub fn times(&self) -> &[f64] {
        &self.s
    }

    pub fn horizon(&self) -> f64 {
        *self.s.last().expect("non-empty")
    }

    pub fn sigma_eff2(&self) -> f64 {
        self.sigma_eff2
    }

    pub fn k1(&self) -> Vec<f64> {
        self.k.iter().map(|k| k[0]).collect()
    }

    pub fn k2(&self) -> Vec<f64> {
        self.k.iter().map(|k| k[1]).collect()
    }

    pub fn k3(&self) -> Vec<f64> {
        self.k.iter().map(|k| k[2]).collect()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.horizon();
        let eps = 1e-12 * (1.0 + end);
        if !(t >= -eps && t <= end + eps) {
            return Err(Error::Domain(format!("time {t} is outside [0, {end}]")));
        }
        let i = self
            .s
            .partition_point(|&s| s <= t)
            .clamp(1, self.s.len() - 1);
        let (s0, s1) = (self.s[i - 1], self.s[i]);
        Ok((i, ((t - s0) / (s1 - s0)).clamp(0.0, 1.0)))
    }

    fn lerp(rows: &[[f64; 3]], i: usize, w: f64) -> [f64; 3] {
        [0, 1, 2].map(|j| (1.0 - w) * rows[i - 1][j] + w * rows[i][j])
    }

    /// `(k1, k2, k3)(t)`, linear between grid points.
    pub fn at(&self, t: f64) -> Result<[f64; 3]> {
        let (i, w) = self.locate(t)?;
        Ok(Self::lerp(&self.k, i, w))
    }

    /// `(k1', k2', k3')(t)`, linear between grid points.
    pub fn derivative_at(&self, t: f64) -> Result<[f64; 3]> {
        let (i, w) = self.locate(t)?;
        Ok(Self::lerp(&self.dk, i, w))
    }

    /// The same curves with `k1` (and its derivative) multiplied by `c`;
    /// no longer a Riccati solution unless `c = 1`.
    pub fn scaled_k1(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.k.iter_mut().for_each(|k| k[0] *= c);
        out.dk.iter_mut().for_each(|k| k[0] *= c);
        out
    }

    /// Writes `s,k1,k2,k3`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "k1", "k2", "k3"])?;
        for (s, k) in self.s.iter().zip(&self.k) {
            w.write_record([
                s.to_string(),
                k[0].to_string(),
                k[1].to_string(),
                k[2].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `u(t, x, m) = (2 k1 + k2) x + (k2 + 2 k3) <m, q>`, `q(x) = x`.
pub fn lq_feedback(curves: &RiccatiCurves) -> ControlPolicy {
    let curves = Arc::new(curves.clone());
    ControlPolicy::unbounded(move |t, x, law: &LawView| {
        let [k1, k2, k3] = curves.at(t)?;
        Ok((2.0 * k1 + k2) * x + (k2 + 2.0 * k3) * law.mean())
    })
}

/// `phi(s, x, m) = k1(s) x^2 + k2(s) x z + k3(s) z^2` with `z = <m, q>`.
/// Times outside `[0, T]` are clamped to the nearest end.
pub fn lq_value(curves: &RiccatiCurves) -> CylindricalValueFunction {
    let curves = Arc::new(curves.clone());
    let end = curves.horizon();
    CylindricalValueFunction::analytic(vec![TestPolynomial::identity()], move |s, x, z| {
        let s = s.clamp(0.0, end);
        let [k1, k2, k3] = curves.at(s).expect("clamped into range");
        let [d1, d2, d3] = curves.derivative_at(s).expect("clamped into range");
        let z = z[0];
        let mut dz = [0.0; MAX_PAIRINGS];
        dz[0] = k2 * x + 2.0 * k3 * z;
        OuterDerivatives {
            value: k1 * x * x + k2 * x * z + k3 * z * z,
            ds: d1 * x * x + d2 * x * z + d3 * z * z,
            dx: 2.0 * k1 * x + k2 * z,
            dxx: 2.0 * k1,
            dz,
        }
    })
    .expect("one pairing")
}

/// `alpha = u`, `beta = sigma <m, q>`, `gamma = gamma0(zeta) <m, q>` with
/// `gamma0(zeta) = zeta`; the jump sizes are carried by the atoms of `nu`.
pub fn lq_model(sigma: f64) -> Result<CoefficientModel> {
    if !sigma.is_finite() {
        return Err(invalid("sigma", "must be finite"));
    }
    CoefficientModel::new(
        |_, _, _, u| u,
        move |_, _, law: &LawView, _| sigma * law.mean(),
        |_, law: &LawView, _, zeta| zeta * law.mean(),
    )
}

/// Running reward `-u^2 / 2` and terminal reward `-x^2 / 2`.
pub fn lq_cost() -> RunningCost {
    RunningCost::new(|_, _, _, u: f64| -0.5 * u * u, |x, _| -0.5 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Law;

    fn analytic_k1(s: f64, horizon: f64) -> f64 {
        -1.0 / (2.0 + 2.0 * (horizon - s))
    }

    #[test]
    fn sigma_zero_matches_analytic_solution() {
        let c = riccati_solve(0.0, 0.0, 1.0, 1e-3).unwrap();
        assert!((c.at(0.0).unwrap()[0] + 0.25).abs() < 1e-9);
        for (s, k1) in c.times().iter().zip(c.k1()) {
            assert!((k1 - analytic_k1(*s, 1.0)).abs() < 1e-9);
        }
        assert!(c.k2().iter().chain(c.k3().iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_values_and_slope() {
        let sigma_eff2 = 0.25 + 0.18;
        let c = riccati_solve(0.5, 0.18, 1.0, 1e-3).unwrap();
        assert_eq!(c.at(1.0).unwrap(), [-0.5, 0.0, 0.0]);
        let d = c.derivative_at(1.0).unwrap();
        assert!((d[2] - 0.5 * sigma_eff2).abs() < 1e-15);
    }

    #[test]
    fn fourth_order_convergence() {
        let err =
            |dt: f64| (riccati_solve(0.0, 0.0, 1.0, dt).unwrap().at(0.0).unwrap()[0] + 0.25).abs();
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn blow_up_is_reported() {
        // A huge jump moment drives k3 past the guard within a few steps.
        let err = riccati_solve(0.0, 1e12, 1.0, 1e-2).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }

    #[test]
    fn feedback_at_terminal_time() {
        let c = riccati_solve(0.5, 0.0, 1.0, 1e-3).unwrap();
        let u = lq_feedback(&c);
        let law = LawView::gaussian(0.7, 1.0);
        assert!((u.evaluate(1.0, 1.3, &law).unwrap() + 1.3).abs() < 1e-15);
        assert!(u.evaluate(1.5, 1.3, &law).is_err());

        let zero = riccati_solve(0.0, 0.0, 1.0, 1e-3).unwrap();
        let u = lq_feedback(&zero);
        let a = u.evaluate(0.3, 1.0, &LawView::point_mass(5.0)).unwrap();
        let b = u.evaluate(0.3, 1.0, &LawView::point_mass(-2.0)).unwrap();
        assert_eq!(a, b);
        assert!((a - 2.0 * analytic_k1(0.3, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn value_function_examples() {
        use crate::measures::{GridDensity, GridSpec};
        let c = riccati_solve(0.0, 0.0, 1.0, 1e-3).unwrap();
        let phi = lq_value(&c);
        let m = GridDensity::normal(GridSpec::new(-6.0, 6.0, 0.05).unwrap(), 0.4, 1.0).unwrap();
        let v = phi.value(1.0, 1.7, &m).unwrap();
        assert_eq!(v, -0.5 * 1.7 * 1.7);
        let z = m.pairing(&TestPolynomial::identity()).unwrap();
        let k = c.at(0.0).unwrap();
        assert!((phi.outer().value(0.0, 1.0, &[1.0]) - (k[0] + k[1] + k[2])).abs() < 1e-15);
        assert!((phi.outer().value(0.0, 1.0, &[1.0]) + 0.25).abs() < 1e-9);
        assert!(z.is_finite());
    }

    #[test]
    fn forms_agree_without_noise() {
        let a = riccati_solve_form(0.0, 0.0, 1.0, 1e-2, RiccatiForm::AsPrinted).unwrap();
        let b = riccati_solve(0.0, 0.0, 1.0, 1e-2).unwrap();
        assert_eq!(a, b);
        let a = riccati_solve_form(0.5, 0.0, 1.0, 1e-2, RiccatiForm::AsPrinted).unwrap();
        let b = riccati_solve(0.5, 0.0, 1.0, 1e-2).unwrap();
        assert_ne!(a.k2(), b.k2());
        assert_eq!(a.k1()[100], b.k1()[100]);
    }

    #[test]
    fn consistent_form_solves_the_hjb_equation_pointwise() {
        // With u^ substituted, f + G phi reduces to a quadratic form in
        // (x, z) whose coefficients vanish along the consistent system.
        let sigma2 = 0.25;
        let c = riccati_solve(0.5, 0.0, 1.0, 1e-3).unwrap();
        for s in [0.0, 0.37, 0.8] {
            let [k1, k2, k3] = c.at(s).unwrap();
            let [d1, d2, d3] = c.derivative_at(s).unwrap();
            let (a, b) = (2.0 * k1 + k2, k2 + 2.0 * k3);
            assert!((0.5 * a * a + d1).abs() < 1e-6);
            assert!((a * b + d2).abs() < 1e-6);
            assert!((0.5 * b * b + d3 + k1 * sigma2).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_header() {
        let c = riccati_solve(0.5, 0.0, 1.0, 0.25).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,k1,k2,k3\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
