use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::measures::LawView;

type StateCoefficient<U> = Arc<dyn Fn(f64, f64, &LawView, U) -> f64 + Send + Sync>;
type JumpCoefficient<U> = Arc<dyn Fn(f64, &LawView, U, f64) -> f64 + Send + Sync>;

/// Drift `alpha(t, x, m, u)`, volatility `beta(t, x, m, u)` and jump size
/// `gamma(t, m, u, zeta)` of a controlled McKean-Vlasov jump diffusion.
///
/// The jump size takes no state argument: shifts of the density are then
/// plain translations, which is what every solver in this crate relies on.
/// The control type `U` is `f64` for single-player problems and a pair for
/// two-player games.
pub struct CoefficientModel<U = f64> {
    alpha: StateCoefficient<U>,
    beta: StateCoefficient<U>,
    gamma: JumpCoefficient<U>,
}

impl<U> Clone for CoefficientModel<U> {
    fn clone(&self) -> Self {
        Self {
            alpha: Arc::clone(&self.alpha),
            beta: Arc::clone(&self.beta),
            gamma: Arc::clone(&self.gamma),
        }
    }
}

impl<U> fmt::Debug for CoefficientModel<U> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CoefficientModel { .. }")
    }
}

impl<U: Copy + Default> CoefficientModel<U> {
    /// Builds the model and spot-checks all three evaluators on a small probe
    /// set of times, states, laws and marks.
    pub fn new(
        alpha: impl Fn(f64, f64, &LawView, U) -> f64 + Send + Sync + 'static,
        beta: impl Fn(f64, f64, &LawView, U) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(f64, &LawView, U, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let model = Self {
            alpha: Arc::new(alpha),
            beta: Arc::new(beta),
            gamma: Arc::new(gamma),
        };
        model.probe()?;
        Ok(model)
    }

    fn probe(&self) -> Result<()> {
        let laws = [
            LawView::point_mass(0.0),
            LawView::point_mass(1.0),
            LawView::gaussian(0.5, 1.0),
        ];
        let u = U::default();
        for t in [0.0, 0.5, 1.0] {
            for law in &laws {
                for x in [-2.0, 0.0, 1.5] {
                    let a = (self.alpha)(t, x, law, u);
                    let b = (self.beta)(t, x, law, u);
                    if !a.is_finite() || !b.is_finite() {
                        return Err(Error::NonFiniteCoefficient(format!(
                            "probe at t = {t}, x = {x} returned alpha = {a}, beta = {b}"
                        )));
                    }
                }
                for zeta in [-1.0, 0.0, 1.0] {
                    let g = (self.gamma)(t, law, u, zeta);
                    if !g.is_finite() {
                        return Err(Error::NonFiniteCoefficient(format!(
                            "probe at t = {t}, zeta = {zeta} returned gamma = {g}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

impl<U: Copy> CoefficientModel<U> {
    #[inline]
    pub fn alpha(&self, t: f64, x: f64, law: &LawView, u: U) -> f64 {
        (self.alpha)(t, x, law, u)
    }

    #[inline]
    pub fn beta(&self, t: f64, x: f64, law: &LawView, u: U) -> f64 {
        (self.beta)(t, x, law, u)
    }

    #[inline]
    pub fn gamma(&self, t: f64, law: &LawView, u: U, zeta: f64) -> f64 {
        (self.gamma)(t, law, u, zeta)
    }
}

impl CoefficientModel<f64> {
    /// `alpha = drift`, `beta = vol`, no jumps.
    pub fn constant(drift: f64, vol: f64) -> Result<Self> {
        Self::new(
            move |_, _, _, _| drift,
            move |_, _, _, _| vol,
            |_, _, _, _| 0.0,
        )
    }
}

/// Coefficients of the density equation written in non-divergence form,
/// `a m + b m' + c^2 m'' / 2 + jumps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// `a = -alpha' + (beta^2)''/2`, `b = -alpha + (beta^2)'`, `c = beta`, with
/// x-derivatives by central differences of step `h`.
pub fn abc_coefficients<U: Copy>(
    model: &CoefficientModel<U>,
    t: f64,
    x: f64,
    law: &LawView,
    u: U,
    h: f64,
) -> Result<AbcCoefficients> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid("h", "finite-difference step must be positive"));
    }
    let alpha = |x: f64| model.alpha(t, x, law, u);
    let beta2 = |x: f64| {
        let b = model.beta(t, x, law, u);
        b * b
    };
    let (a_lo, a_mid, a_hi) = (alpha(x - h), alpha(x), alpha(x + h));
    let (b_lo, b_mid, b_hi) = (beta2(x - h), beta2(x), beta2(x + h));
    let c = model.beta(t, x, law, u);
    let d_alpha = (a_hi - a_lo) / (2.0 * h);
    let d_beta2 = (b_hi - b_lo) / (2.0 * h);
    let dd_beta2 = ((b_hi - b_mid) + (b_lo - b_mid)) / (h * h);
    let out = AbcCoefficients {
        a: -d_alpha + 0.5 * dd_beta2,
        b: -a_mid + d_beta2,
        c,
    };
    if !(out.a.is_finite() && out.b.is_finite() && out.c.is_finite()) {
        return Err(Error::NonFiniteCoefficient(format!(
            "a, b, c at t = {t}, x = {x}: {out:?}"
        )));
    }
    Ok(out)
}

type Feedback = Arc<dyn Fn(f64, f64, &LawView) -> Result<f64> + Send + Sync>;

/// Markov feedback control `u = u(t, x, m)` clamped into `[lo, hi]`.
#[derive(Clone)]
pub struct ControlPolicy {
    rule: Feedback,
    lo: f64,
    hi: f64,
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPolicy")
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .finish_non_exhaustive()
    }
}

impl ControlPolicy {
    pub fn new(
        lo: f64,
        hi: f64,
        rule: impl Fn(f64, f64, &LawView) -> Result<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(invalid(
                "bounds",
                format!("admissible box [{lo}, {hi}] is empty"),
            ));
        }
        Ok(Self {
            rule: Arc::new(rule),
            lo,
            hi,
        })
    }

    pub fn unbounded(
        rule: impl Fn(f64, f64, &LawView) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY, rule).expect("unbounded box is valid")
    }

    pub fn constant(u: f64) -> Self {
        Self::unbounded(move |_, _, _| Ok(u))
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn evaluate(&self, t: f64, x: f64, law: &LawView) -> Result<f64> {
        let u = (self.rule)(t, x, law)?;
        if u.is_nan() {
            return Err(Error::NonFiniteCoefficient(format!(
                "control is NaN at t = {t}, x = {x}"
            )));
        }
        Ok(u.clamp(self.lo, self.hi))
    }

    /// The policy `u + delta`, clamped into the same box.
    pub fn shifted(&self, delta: f64) -> Self {
        let rule = Arc::clone(&self.rule);
        Self {
            rule: Arc::new(move |t, x, law| Ok(rule(t, x, law)? + delta)),
            lo: self.lo,
            hi: self.hi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_rejects_non_finite_coefficients() {
        let err =
            CoefficientModel::<f64>::new(|_, x, _, _| 1.0 / x, |_, _, _, _| 0.0, |_, _, _, _| 0.0)
                .unwrap_err();
        assert!(matches!(err, Error::NonFiniteCoefficient(_)));
    }

    #[test]
    fn constant_coefficients_give_exact_abc() {
        let model = CoefficientModel::constant(0.7, 1.3).unwrap();
        let law = LawView::point_mass(0.0);
        let abc = abc_coefficients(&model, 0.0, 0.4, &law, 0.0, 1e-4).unwrap();
        assert_eq!(abc.a, 0.0);
        assert_eq!(abc.b, -0.7);
        assert_eq!(abc.c, 1.3);
    }

    #[test]
    fn linear_drift_abc() {
        let model =
            CoefficientModel::new(|_, x, _, _: f64| x, |_, _, _, _| 0.0, |_, _, _, _| 0.0).unwrap();
        let law = LawView::point_mass(0.0);
        let abc = abc_coefficients(&model, 0.0, 0.8, &law, 0.0, 1e-4).unwrap();
        assert!((abc.a + 1.0).abs() < 1e-10);
        assert!((abc.b + 0.8).abs() < 1e-12);
        assert_eq!(abc.c, 0.0);
    }

    #[test]
    fn quadratic_drift_linear_volatility_abc() {
        // alpha = x^2, beta = x at x = 1: a = -2 + 1, b = -1 + 2, c = 1.
        let model =
            CoefficientModel::new(|_, x, _, _: f64| x * x, |_, x, _, _| x, |_, _, _, _| 0.0)
                .unwrap();
        let law = LawView::point_mass(0.0);
        let abc = abc_coefficients(&model, 0.0, 1.0, &law, 0.0, 1e-4).unwrap();
        assert!((abc.a + 1.0).abs() < 1e-6, "{abc:?}");
        assert!((abc.b - 1.0).abs() < 1e-8, "{abc:?}");
        assert_eq!(abc.c, 1.0);
    }

    #[test]
    fn policy_is_clamped() {
        let p = ControlPolicy::new(-1.0, 1.0, |_, x, _| Ok(3.0 * x)).unwrap();
        let law = LawView::point_mass(0.0);
        assert_eq!(p.evaluate(0.0, 1.0, &law).unwrap(), 1.0);
        assert_eq!(p.evaluate(0.0, -1.0, &law).unwrap(), -1.0);
        assert_eq!(p.evaluate(0.0, 0.1, &law).unwrap(), 0.30000000000000004);
        assert_eq!(p.shifted(0.5).evaluate(0.0, 0.1, &law).unwrap(), 0.8);
        assert!(ControlPolicy::new(1.0, -1.0, |_, _, _| Ok(0.0)).is_err());
    }
}
