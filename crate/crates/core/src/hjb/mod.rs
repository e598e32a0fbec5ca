//! Generators of the lifted process `(s + t, X(t), m_t)` acting on
//! cylindrical candidate value functions, and the verification checks built
//! on top of them.
//!
//! A cylindrical function depends on the law only through finitely many
//! pairings, `phi(s, x, m) = F(s, x, <m, q_1>, ..., <m, q_k>)`. Its measure
//! derivative along `A*_u m` follows from the chain rule and duality:
//!
//! ```text
//! <grad_m phi, A*_u m> = sum_i dF/dz_i <m, A_u q_i>.
//! ```

mod performance;
mod verify;

use std::fmt;
use std::sync::Arc;

use crate::dynamics::CoefficientModel;
use crate::error::{invalid, Error, Result};
use crate::jumps::JumpMeasure;
use crate::measures::{Law, LawView, TestPolynomial};

pub use performance::{estimate_performance, PerformanceEstimate};
pub use verify::{
    hjb_residual, hjbi_zero_sum_check, nash_check, ConditionReport, ControlGrid, EvalBox,
    HjbReport, HjbiReport, NashReport, PlayerReport, RunningCost, WorstPoint,
};

/// Largest number of pairings a cylindrical function may use.
pub const MAX_PAIRINGS: usize = 4;

/// Value and derivatives of the outer function `F(s, x, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OuterDerivatives {
    pub value: f64,
    pub ds: f64,
    pub dx: f64,
    pub dxx: f64,
    /// `dF/dz_i`; entries past the number of pairings are ignored.
    pub dz: [f64; MAX_PAIRINGS],
}

impl OuterDerivatives {
    fn is_finite(&self, k: usize) -> bool {
        [self.value, self.ds, self.dx, self.dxx]
            .iter()
            .chain(&self.dz[..k])
            .all(|v| v.is_finite())
    }
}

/// The outer function of a cylindrical value function.
pub trait OuterFunction: Send + Sync {
    fn value(&self, s: f64, x: f64, z: &[f64]) -> f64;
    fn derivatives(&self, s: f64, x: f64, z: &[f64]) -> OuterDerivatives;
}

type AnalyticFn = Arc<dyn Fn(f64, f64, &[f64]) -> OuterDerivatives + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Outer function with derivatives supplied in closed form.
#[derive(Clone)]
pub struct AnalyticOuter(AnalyticFn);

impl AnalyticOuter {
    pub fn new(f: impl Fn(f64, f64, &[f64]) -> OuterDerivatives + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl OuterFunction for AnalyticOuter {
    fn value(&self, s: f64, x: f64, z: &[f64]) -> f64 {
        (self.0)(s, x, z).value
    }

    fn derivatives(&self, s: f64, x: f64, z: &[f64]) -> OuterDerivatives {
        (self.0)(s, x, z)
    }
}

/// Central-difference steps for [`FiniteDifferenceOuter`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub s: f64,
    pub x: f64,
    pub z: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            s: 1e-4,
            x: 1e-3,
            z: 1e-4,
        }
    }
}

/// Outer function given by values only; derivatives by central differences.
#[derive(Clone)]
pub struct FiniteDifferenceOuter {
    f: ScalarFn,
    steps: FdSteps,
}

impl FiniteDifferenceOuter {
    pub fn new(
        steps: FdSteps,
        f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        for (name, h) in [("s", steps.s), ("x", steps.x), ("z", steps.z)] {
            if !(h.is_finite() && h > 0.0) {
                return Err(invalid(
                    "steps",
                    format!("{name} step {h} must be positive"),
                ));
            }
        }
        Ok(Self {
            f: Arc::new(f),
            steps,
        })
    }
}

impl OuterFunction for FiniteDifferenceOuter {
    fn value(&self, s: f64, x: f64, z: &[f64]) -> f64 {
        (self.f)(s, x, z)
    }

    fn derivatives(&self, s: f64, x: f64, z: &[f64]) -> OuterDerivatives {
        let f = &self.f;
        let FdSteps {
            s: hs,
            x: hx,
            z: hz,
        } = self.steps;
        let value = f(s, x, z);
        let (xp, xm) = (f(s, x + hx, z), f(s, x - hx, z));
        let mut dz = [0.0; MAX_PAIRINGS];
        let mut zz = [0.0; MAX_PAIRINGS];
        zz[..z.len()].copy_from_slice(z);
        for i in 0..z.len() {
            zz[i] = z[i] + hz;
            let up = f(s, x, &zz[..z.len()]);
            zz[i] = z[i] - hz;
            let down = f(s, x, &zz[..z.len()]);
            zz[i] = z[i];
            dz[i] = (up - down) / (2.0 * hz);
        }
        OuterDerivatives {
            value,
            ds: (f(s + hs, x, z) - f(s - hs, x, z)) / (2.0 * hs),
            dx: (xp - xm) / (2.0 * hx),
            dxx: ((xp - value) + (xm - value)) / (hx * hx),
            dz,
        }
    }
}

/// `phi(s, x, m) = F(s, x, <m, q_1>, ..., <m, q_k>)` with `k <= 4`.
#[derive(Clone)]
pub struct CylindricalValueFunction {
    tests: Vec<TestPolynomial>,
    outer: Arc<dyn OuterFunction>,
}

impl fmt::Debug for CylindricalValueFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylindricalValueFunction")
            .field("tests", &self.tests)
            .finish_non_exhaustive()
    }
}

impl CylindricalValueFunction {
    pub fn new(tests: Vec<TestPolynomial>, outer: impl OuterFunction + 'static) -> Result<Self> {
        if tests.len() > MAX_PAIRINGS {
            return Err(invalid(
                "tests",
                format!("{} pairings requested, at most {MAX_PAIRINGS}", tests.len()),
            ));
        }
        Ok(Self {
            tests,
            outer: Arc::new(outer),
        })
    }

    pub fn analytic(
        tests: Vec<TestPolynomial>,
        f: impl Fn(f64, f64, &[f64]) -> OuterDerivatives + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(tests, AnalyticOuter::new(f))
    }

    pub fn finite_difference(
        tests: Vec<TestPolynomial>,
        steps: FdSteps,
        f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(tests, FiniteDifferenceOuter::new(steps, f)?)
    }

    /// A function of `(s, x)` alone.
    pub fn state_only(f: impl Fn(f64, f64) -> OuterDerivatives + Send + Sync + 'static) -> Self {
        Self::analytic(Vec::new(), move |s, x, _| f(s, x)).expect("no pairings")
    }

    pub fn tests(&self) -> &[TestPolynomial] {
        &self.tests
    }

    pub fn outer(&self) -> &dyn OuterFunction {
        self.outer.as_ref()
    }

    /// `[<m, q_1>, ..., <m, q_k>]`, padded with zeros.
    pub fn pairings<L: Law>(&self, m: &L) -> Result<[f64; MAX_PAIRINGS]> {
        let mut z = [0.0; MAX_PAIRINGS];
        for (zi, q) in z.iter_mut().zip(&self.tests) {
            *zi = m.pairing(q)?;
        }
        Ok(z)
    }

    pub fn value<L: Law>(&self, s: f64, x: f64, m: &L) -> Result<f64> {
        let z = self.pairings(m)?;
        Ok(self.outer.value(s, x, &z[..self.tests.len()]))
    }

    pub(crate) fn derivatives_at(&self, s: f64, x: f64, z: &[f64]) -> Result<OuterDerivatives> {
        let k = self.tests.len();
        let d = self.outer.derivatives(s, x, &z[..k]);
        if !d.is_finite(k) {
            return Err(Error::NumericalOverflow {
                location: format!("value function derivatives at s = {s}, x = {x}"),
            });
        }
        Ok(d)
    }

    /// `c phi`.
    pub fn scaled(&self, c: f64) -> Self {
        let outer = Arc::clone(&self.outer);
        let f = move |s: f64, x: f64, z: &[f64]| {
            let mut d = outer.derivatives(s, x, z);
            d.value *= c;
            d.ds *= c;
            d.dx *= c;
            d.dxx *= c;
            d.dz.iter_mut().for_each(|v| *v *= c);
            d
        };
        Self::analytic(self.tests.clone(), f).expect("same pairing count")
    }

    /// `a phi_1 + b phi_2`, pairing against the test polynomials of both.
    pub fn linear_combination(a: f64, phi1: &Self, b: f64, phi2: &Self) -> Result<Self> {
        let k1 = phi1.tests.len();
        let mut tests = phi1.tests.clone();
        tests.extend(phi2.tests.iter().cloned());
        if tests.len() > MAX_PAIRINGS {
            return Err(invalid(
                "tests",
                format!("combined function needs {} pairings", tests.len()),
            ));
        }
        let (o1, o2) = (Arc::clone(&phi1.outer), Arc::clone(&phi2.outer));
        let f = move |s: f64, x: f64, z: &[f64]| {
            let d1 = o1.derivatives(s, x, &z[..k1]);
            let d2 = o2.derivatives(s, x, &z[k1..]);
            let mut dz = [0.0; MAX_PAIRINGS];
            dz[..k1]
                .iter_mut()
                .zip(&d1.dz)
                .for_each(|(o, v)| *o = a * v);
            dz[k1..z.len()]
                .iter_mut()
                .zip(&d2.dz)
                .for_each(|(o, v)| *o = b * v);
            OuterDerivatives {
                value: a * d1.value + b * d2.value,
                ds: a * d1.ds + b * d2.ds,
                dx: a * d1.dx + b * d2.dx,
                dxx: a * d1.dxx + b * d2.dxx,
                dz,
            }
        };
        Self::analytic(tests, f)
    }
}

/// `<m, A_u q>` with
/// `A_u q = alpha q' + beta^2 q'' / 2 + int {q(. + gamma) - q - gamma q'} dnu`,
/// integrated against `m` by its own quadrature.
pub fn dual_pairing<U: Copy, L: Law>(
    model: &CoefficientModel<U>,
    nu: &JumpMeasure,
    t: f64,
    m: &L,
    u: U,
    q: &TestPolynomial,
) -> Result<f64> {
    let view = m.view();
    let jump = jump_part(model, nu, t, &view, u, q)?;
    dual_pairing_with(model, t, m, &view, u, q, &jump)
}

/// `int {q(. + gamma) - q - gamma q'} dnu` as a polynomial.
fn jump_part<U: Copy>(
    model: &CoefficientModel<U>,
    nu: &JumpMeasure,
    t: f64,
    view: &LawView,
    u: U,
    q: &TestPolynomial,
) -> Result<TestPolynomial> {
    let dq = q.derivative();
    let mut acc = TestPolynomial::constant(0.0);
    for (j, atom) in nu.atoms().iter().enumerate() {
        let g = model.gamma(t, view, u, atom.zeta);
        if !g.is_finite() {
            return Err(Error::NumericalOverflow {
                location: format!("jump atom {j} (zeta = {})", atom.zeta),
            });
        }
        let bracket = TestPolynomial::combine(1.0, &q.shifted(g), -1.0, q);
        let bracket = TestPolynomial::combine(1.0, &bracket, -g, &dq);
        acc = TestPolynomial::combine(1.0, &acc, atom.intensity, &bracket);
    }
    Ok(acc)
}

fn dual_pairing_with<U: Copy, L: Law>(
    model: &CoefficientModel<U>,
    t: f64,
    m: &L,
    view: &LawView,
    u: U,
    q: &TestPolynomial,
    jump: &TestPolynomial,
) -> Result<f64> {
    let dq = q.derivative();
    let ddq = dq.derivative();
    m.expectation(|y| {
        let b = model.beta(t, y, view, u);
        model.alpha(t, y, view, u) * dq.eval(y) + 0.5 * b * b * ddq.eval(y) + jump.eval(y)
    })
}

/// Law-side quantities shared by every state `x` at one `(s, m)`.
pub(crate) struct LawFrame<'a, L> {
    pub(crate) s: f64,
    pub(crate) m: &'a L,
    pub(crate) view: LawView,
    pub(crate) z: [f64; MAX_PAIRINGS],
}

impl<'a, L: Law> LawFrame<'a, L> {
    pub(crate) fn new(phi: &CylindricalValueFunction, s: f64, m: &'a L) -> Result<Self> {
        Ok(Self {
            s,
            m,
            view: m.view(),
            z: phi.pairings(m)?,
        })
    }

    /// `[<m, A_u q_i>]_i`.
    pub(crate) fn dual_pairings<U: Copy>(
        &self,
        phi: &CylindricalValueFunction,
        model: &CoefficientModel<U>,
        nu: &JumpMeasure,
        u: U,
    ) -> Result<[f64; MAX_PAIRINGS]> {
        let mut out = [0.0; MAX_PAIRINGS];
        for (o, q) in out.iter_mut().zip(phi.tests()) {
            let jump = jump_part(model, nu, self.s, &self.view, u, q)?;
            *o = dual_pairing_with(model, self.s, self.m, &self.view, u, q, &jump)?;
        }
        Ok(out)
    }

    /// `G_u phi(s, x, m)` from precomputed derivatives and dual pairings.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn generator<U: Copy>(
        &self,
        phi: &CylindricalValueFunction,
        model: &CoefficientModel<U>,
        nu: &JumpMeasure,
        x: f64,
        d: &OuterDerivatives,
        dual: &[f64; MAX_PAIRINGS],
        u: U,
    ) -> Result<f64> {
        let k = phi.tests().len();
        let (s, view) = (self.s, &self.view);
        let a = model.alpha(s, x, view, u);
        let b = model.beta(s, x, view, u);
        let lifted: f64 = d.dz[..k].iter().zip(&dual[..k]).map(|(g, p)| g * p).sum();
        let mut jumps = 0.0;
        for atom in nu.atoms() {
            let g = model.gamma(s, view, u, atom.zeta);
            let shifted = phi.outer().value(s, x + g, &self.z[..k]);
            jumps += atom.intensity * (shifted - d.value - g * d.dx);
        }
        let out = d.ds + a * d.dx + lifted + 0.5 * b * b * d.dxx + jumps;
        if !out.is_finite() {
            return Err(Error::NumericalOverflow {
                location: format!("generator at s = {s}, x = {x}"),
            });
        }
        Ok(out)
    }
}

/// `<grad_m phi, A*_u m> = sum_i dF/dz_i <m, A_u q_i>`.
pub fn lifted_m_derivative<U: Copy, L: Law>(
    phi: &CylindricalValueFunction,
    model: &CoefficientModel<U>,
    nu: &JumpMeasure,
    s: f64,
    x: f64,
    m: &L,
    u: U,
) -> Result<f64> {
    let frame = LawFrame::new(phi, s, m)?;
    let d = phi.derivatives_at(s, x, &frame.z)?;
    let dual = frame.dual_pairings(phi, model, nu, u)?;
    let k = phi.tests().len();
    Ok(d.dz[..k].iter().zip(&dual[..k]).map(|(g, p)| g * p).sum())
}

/// `G_u phi = phi_s + alpha phi_x + <grad_m phi, A*_u m> + beta^2 phi_xx / 2
/// + int {phi(s, x + gamma, m) - phi - gamma phi_x} dnu`.
pub fn generator_apply<U: Copy, L: Law>(
    phi: &CylindricalValueFunction,
    model: &CoefficientModel<U>,
    nu: &JumpMeasure,
    s: f64,
    x: f64,
    m: &L,
    u: U,
) -> Result<f64> {
    let frame = LawFrame::new(phi, s, m)?;
    let d = phi.derivatives_at(s, x, &frame.z)?;
    let dual = frame.dual_pairings(phi, model, nu, u)?;
    frame.generator(phi, model, nu, x, &d, &dual, u)
}
