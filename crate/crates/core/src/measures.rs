//! Densities on uniform grids, empirical particle ensembles, polynomial test
//! functions and the pairings `<m, q>` between them.
//!
//! A [`GridDensity`] stores `m(x_i)` at `x_i = x_min + i dx` and is taken to
//! vanish outside the grid. Integrals use the composite trapezoidal rule.
//! An [`EmpiricalEnsemble`] is the uniform atomic measure on `N` particles.
//! Both implement [`Law`]; every coefficient evaluator only ever sees the
//! compact [`LawView`] (raw moments up to order four), which is all a pairing
//! against a [`TestPolynomial`] needs.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

/// Default tolerance on the trapezoidal mass of a [`GridDensity`].
pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-3;

/// Highest polynomial degree accepted by [`TestPolynomial`].
pub const MAX_TEST_DEGREE: usize = 4;

/// Kernel support, in bandwidths, used by [`density_from_ensemble`].
const KDE_CUTOFF: f64 = 10.0;

/// Uniform grid `x_i = x_min + i dx`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    x_min: f64,
    dx: f64,
    n: usize,
}

impl GridSpec {
    /// Grid covering `[x_min, x_max]` with spacing `dx`. The spacing must
    /// divide the interval.
    pub fn new(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(invalid(
                "x_max",
                "grid bounds must be finite with x_max > x_min",
            ));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(invalid("dx", "grid spacing must be positive"));
        }
        let cells = (x_max - x_min) / dx;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(invalid(
                "dx",
                format!("spacing {dx} does not divide [{x_min}, {x_max}]"),
            ));
        }
        Self::from_parts(x_min, dx, rounded as usize + 1)
    }

    pub fn from_parts(x_min: f64, dx: f64, n: usize) -> Result<Self> {
        if !x_min.is_finite() {
            return Err(invalid("x_min", "must be finite"));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(invalid("dx", "grid spacing must be positive"));
        }
        if n < 3 {
            return Err(invalid("n", "a grid needs at least three points"));
        }
        Ok(Self { x_min, dx, n })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.n - 1)
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Distance between the first and last grid point.
    pub fn width(&self) -> f64 {
        (self.n - 1) as f64 * self.dx
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.x(i))
    }

    /// Trapezoidal quadrature weight of node `i`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n {
            0.5 * self.dx
        } else {
            self.dx
        }
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.n == other.n
            && (self.dx - other.dx).abs() <= 1e-12 * self.dx
            && (self.x_min - other.x_min).abs() <= 1e-12 * (1.0 + self.x_min.abs())
    }
}

pub(crate) fn trapezoid(grid: &GridSpec, values: &[f64]) -> f64 {
    let n = values.len();
    let interior: f64 = values.iter().sum();
    grid.dx * (interior - 0.5 * (values[0] + values[n - 1]))
}

/// Linear interpolation of grid values at `x`; zero outside the grid.
pub(crate) fn interpolate(grid: &GridSpec, values: &[f64], x: f64) -> f64 {
    let p = (x - grid.x_min) / grid.dx;
    interpolate_index(values, p)
}

#[inline]
fn interpolate_index(values: &[f64], p: f64) -> f64 {
    let last = (values.len() - 1) as f64;
    if !(0.0..=last).contains(&p) {
        return 0.0;
    }
    let k = p.floor();
    let theta = p - k;
    let k = k as usize;
    if theta == 0.0 || k + 1 >= values.len() {
        values[k]
    } else {
        (1.0 - theta) * values[k] + theta * values[k + 1]
    }
}

/// Values of `x -> f(x - gamma)` on the grid, by linear interpolation.
pub(crate) fn shifted_values(values: &[f64], dx: f64, gamma: f64) -> Vec<f64> {
    let offset = gamma / dx;
    (0..values.len())
        .map(|i| interpolate_index(values, i as f64 - offset))
        .collect()
}

/// Polynomial `q(x) = sum_j c_j x^j` of degree at most four.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPolynomial {
    coeffs: Vec<f64>,
}

impl TestPolynomial {
    pub fn new(coeffs: impl Into<Vec<f64>>) -> Result<Self> {
        let mut coeffs = coeffs.into();
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("coefficients", "must be finite"));
        }
        while coeffs.len() > 1 && coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        if coeffs.len() > MAX_TEST_DEGREE + 1 {
            return Err(invalid(
                "coefficients",
                format!(
                    "degree {} exceeds the maximum {MAX_TEST_DEGREE}",
                    coeffs.len() - 1
                ),
            ));
        }
        Ok(Self { coeffs })
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c]).expect("finite constant")
    }

    /// `q(x) = x`, whose pairing is the mean.
    pub fn identity() -> Self {
        Self {
            coeffs: vec![0.0, 1.0],
        }
    }

    pub fn monomial(k: usize) -> Result<Self> {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Self::new(c)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Self {
        if self.coeffs.len() == 1 {
            return Self::constant(0.0);
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, c)| j as f64 * c)
            .collect::<Vec<_>>();
        Self::new(coeffs).expect("derivative keeps degree bound")
    }

    /// The translate `x -> q(x + gamma)`.
    pub fn shifted(&self, gamma: f64) -> Self {
        let d = self.coeffs.len();
        let mut out = vec![0.0; d];
        for (j, &c) in self.coeffs.iter().enumerate() {
            // (x + g)^j = sum_k C(j,k) x^k g^(j-k)
            let mut binom = 1.0;
            for k in (0..=j).rev() {
                out[k] += c * binom * gamma.powi((j - k) as i32);
                binom = binom * k as f64 / (j - k + 1) as f64;
            }
        }
        Self::new(out).expect("translation keeps degree bound")
    }

    /// `a p + b q`.
    pub fn combine(a: f64, p: &Self, b: f64, q: &Self) -> Self {
        let d = p.coeffs.len().max(q.coeffs.len());
        let coeffs = (0..d)
            .map(|j| {
                a * p.coeffs.get(j).copied().unwrap_or(0.0)
                    + b * q.coeffs.get(j).copied().unwrap_or(0.0)
            })
            .collect::<Vec<_>>();
        Self::new(coeffs).expect("combination keeps degree bound")
    }
}

/// What coefficient evaluators see of the law: raw moments `int x^k m(dx)`
/// for `k = 0..=4`. Moments are not normalized by the mass, so `mean()` is
/// the pairing with `q(x) = x` exactly as the density defines it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawView {
    moments: [f64; MAX_TEST_DEGREE + 1],
}

impl LawView {
    pub fn from_moments(moments: [f64; MAX_TEST_DEGREE + 1]) -> Self {
        Self { moments }
    }

    pub fn point_mass(x: f64) -> Self {
        let mut moments = [0.0; MAX_TEST_DEGREE + 1];
        let mut p = 1.0;
        for m in moments.iter_mut() {
            *m = p;
            p *= x;
        }
        Self { moments }
    }

    /// Moments of `N(mean, std^2)`.
    pub fn gaussian(mean: f64, std: f64) -> Self {
        let v = std * std;
        Self {
            moments: [
                1.0,
                mean,
                mean * mean + v,
                mean.powi(3) + 3.0 * mean * v,
                mean.powi(4) + 6.0 * mean * mean * v + 3.0 * v * v,
            ],
        }
    }

    pub fn moment(&self, k: usize) -> f64 {
        self.moments[k]
    }

    pub fn moments(&self) -> &[f64; MAX_TEST_DEGREE + 1] {
        &self.moments
    }

    pub fn mass(&self) -> f64 {
        self.moments[0]
    }

    /// `<m, x>`.
    pub fn mean(&self) -> f64 {
        self.moments[1]
    }

    pub fn pairing(&self, q: &TestPolynomial) -> f64 {
        q.coeffs
            .iter()
            .zip(self.moments.iter())
            .map(|(c, m)| c * m)
            .sum()
    }

    /// `(1 - w) self + w other`, used for interpolating law trajectories.
    pub fn lerp(&self, other: &LawView, w: f64) -> LawView {
        let mut moments = self.moments;
        for (m, o) in moments.iter_mut().zip(other.moments.iter()) {
            *m = (1.0 - w) * *m + w * o;
        }
        LawView { moments }
    }
}

/// A probability law that can be integrated against test functions.
pub trait Law {
    /// `int f dm`, failing with the offending location when a term is not
    /// finite.
    fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64>;

    fn view(&self) -> LawView;

    /// `<m, q>`.
    fn pairing(&self, q: &TestPolynomial) -> Result<f64> {
        self.expectation(|x| q.eval(x))
    }
}

/// Probability density on a uniform grid, zero outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: GridSpec,
    values: Vec<f64>,
    tol_mass: f64,
}

impl GridDensity {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(grid, values, DEFAULT_MASS_TOLERANCE)
    }

    pub fn with_tolerance(grid: GridSpec, values: Vec<f64>, tol_mass: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(
                "values",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        if !(tol_mass.is_finite() && tol_mass >= 0.0) {
            return Err(invalid("tol_mass", "must be a non-negative number"));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(invalid(
                "values",
                format!(
                    "density value {v} at x = {} is negative or not finite",
                    grid.x(i)
                ),
            ));
        }
        let mass = trapezoid(&grid, &values);
        if (mass - 1.0).abs() > tol_mass {
            return Err(invalid(
                "values",
                format!("trapezoidal mass {mass} is outside 1 +/- {tol_mass}"),
            ));
        }
        Ok(Self {
            grid,
            values,
            tol_mass,
        })
    }

    /// Samples `f` on the grid and validates the result.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.points().map(f).collect())
    }

    /// Samples `f` on the grid and rescales to unit trapezoidal mass.
    pub fn from_fn_normalized(grid: GridSpec, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.points().map(f).collect();
        normalize(grid, values, DEFAULT_MASS_TOLERANCE)
    }

    /// Gaussian `N(mean, std^2)` density sampled on the grid (not renormalized).
    pub fn normal(grid: GridSpec, mean: f64, std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) {
            return Err(invalid("std", "must be positive"));
        }
        Self::from_fn(grid, |x| normal_pdf(x, mean, std))
    }

    pub(crate) fn from_trusted(grid: GridSpec, values: Vec<f64>, tol_mass: f64) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self {
            grid,
            values,
            tol_mass,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tol_mass(&self) -> f64 {
        self.tol_mass
    }

    pub fn mass(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// `sum_i m_i (1 + x_i^2) dx`, the weighted L1 norm with weight
    /// `K(dx) = (1 + x^2) dx`.
    pub fn k_norm(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let x = self.grid.x(i);
                m * (1.0 + x * x) * self.grid.dx
            })
            .sum()
    }

    /// Linear interpolation, zero off the grid.
    pub fn value_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.values, x)
    }

    /// Rescaled to unit trapezoidal mass.
    pub fn normalized(&self) -> Result<Self> {
        normalize(self.grid, self.values.clone(), self.tol_mass)
    }

    /// The density of `X + gamma` when `X` has density `self`, i.e.
    /// `x -> m(x - gamma)`, by linear interpolation. Mass pushed off the grid
    /// is reported in [`Shift::lost_mass`] and is not restored.
    pub fn gamma_shift(&self, gamma: f64) -> Result<Shift> {
        if !gamma.is_finite() || gamma.abs() >= self.grid.width() {
            return Err(Error::Domain(format!(
                "shift {gamma} is not smaller than the grid width {}",
                self.grid.width()
            )));
        }
        let values = shifted_values(&self.values, self.grid.dx, gamma);
        let lost_mass = self.mass() - trapezoid(&self.grid, &values);
        let density = GridDensity::from_trusted(self.grid, values, self.tol_mass + lost_mass.abs());
        Ok(Shift { density, lost_mass })
    }

    /// L1 distance to a reference density `f` over the grid.
    pub fn l1_distance(&self, f: impl Fn(f64) -> f64) -> f64 {
        let diffs: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, m)| (m - f(self.grid.x(i))).abs())
            .collect();
        trapezoid(&self.grid, &diffs)
    }

    /// Writes `x,density` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "density"])?;
        for (x, m) in self.grid.points().zip(self.values.iter()) {
            w.write_record([x.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `x,density` rows written by [`GridDensity::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let parse = |k: usize| -> Result<f64> {
                record
                    .get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| invalid("csv", format!("bad field {k} in row {:?}", record)))
            };
            xs.push(parse(0)?);
            ms.push(parse(1)?);
        }
        if xs.len() < 3 {
            return Err(invalid("csv", "need at least three rows"));
        }
        let grid = GridSpec::from_parts(xs[0], xs[1] - xs[0], xs.len())?;
        Self::new(grid, ms)
    }
}

fn normalize(grid: GridSpec, mut values: Vec<f64>, tol_mass: f64) -> Result<GridDensity> {
    let mass = trapezoid(&grid, &values);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(invalid("values", format!("cannot normalize mass {mass}")));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    GridDensity::with_tolerance(grid, values, tol_mass)
}

impl Law for GridDensity {
    fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (i, m) in self.values.iter().enumerate() {
            let x = self.grid.x(i);
            let term = f(x) * m * self.grid.weight(i);
            if !term.is_finite() {
                return Err(Error::NumericalOverflow {
                    location: format!("grid cell {i} (x = {x})"),
                });
            }
            acc += term;
        }
        if !acc.is_finite() {
            return Err(Error::NumericalOverflow {
                location: "grid quadrature sum".into(),
            });
        }
        Ok(acc)
    }

    fn view(&self) -> LawView {
        let mut moments = [0.0; MAX_TEST_DEGREE + 1];
        for (i, m) in self.values.iter().enumerate() {
            let x = self.grid.x(i);
            let w = m * self.grid.weight(i);
            let mut p = w;
            for mk in moments.iter_mut() {
                *mk += p;
                p *= x;
            }
        }
        LawView { moments }
    }
}

/// Result of [`GridDensity::gamma_shift`].
#[derive(Debug, Clone)]
pub struct Shift {
    pub density: GridDensity,
    /// Trapezoidal mass of the input minus that of the shifted density.
    pub lost_mass: f64,
}

/// Signed function on a grid, such as the output of the adjoint operator.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: GridSpec,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid("values", "length does not match grid"));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.values, x)
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// Trapezoidal `int q(x) h(x) dx`.
    pub fn pairing(&self, q: &TestPolynomial) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, h)| q.eval(self.grid.x(i)) * h * self.grid.weight(i))
            .sum()
    }
}

/// Uniformly weighted particle positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalEnsemble {
    positions: Vec<f64>,
}

impl EmpiricalEnsemble {
    pub fn new(positions: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(invalid(
                "positions",
                "an ensemble needs at least one particle",
            ));
        }
        if let Some((j, x)) = positions.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(invalid(
                "positions",
                format!("particle {j} has non-finite position {x}"),
            ));
        }
        let second = positions.iter().map(|x| x * x).sum::<f64>();
        if !second.is_finite() {
            return Err(Error::NumericalOverflow {
                location: "ensemble second moment".into(),
            });
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.positions.iter().sum::<f64>() / self.len() as f64
    }

    /// Population variance (divisor `N`).
    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.positions
            .iter()
            .map(|x| (x - mu) * (x - mu))
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.positions.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.positions
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(1/N) sum_j exp(-i y X_j)`.
    pub fn characteristic_function(&self, y: f64) -> Complex64 {
        let (mut re, mut im) = (0.0, 0.0);
        for x in &self.positions {
            let (s, c) = (y * x).sin_cos();
            re += c;
            im -= s;
        }
        let n = self.len() as f64;
        Complex64::new(re / n, im / n)
    }

    /// Writes `particle_index,position` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["particle_index", "position"])?;
        for (j, x) in self.positions.iter().enumerate() {
            w.write_record([j.to_string(), x.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut positions = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let x: f64 = record
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid("csv", format!("bad row {:?}", record)))?;
            positions.push(x);
        }
        Self::new(positions)
    }
}

impl Law for EmpiricalEnsemble {
    fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (j, &x) in self.positions.iter().enumerate() {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NumericalOverflow {
                    location: format!("particle {j} (x = {x})"),
                });
            }
            acc += v;
        }
        let out = acc / self.len() as f64;
        if !out.is_finite() {
            return Err(Error::NumericalOverflow {
                location: "ensemble average".into(),
            });
        }
        Ok(out)
    }

    fn view(&self) -> LawView {
        law_view_of_positions(&self.positions)
    }
}

pub(crate) fn law_view_of_positions(positions: &[f64]) -> LawView {
    let mut moments = [0.0; MAX_TEST_DEGREE + 1];
    for &x in positions {
        let mut p = 1.0;
        for mk in moments.iter_mut() {
            *mk += p;
            p *= x;
        }
    }
    let n = positions.len() as f64;
    moments.iter_mut().for_each(|m| *m /= n);
    LawView { moments }
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// Silverman's rule of thumb `0.9 min(sd, IQR/1.34) N^(-1/5)`.
pub fn silverman_bandwidth(ensemble: &EmpiricalEnsemble) -> Result<f64> {
    let n = ensemble.len();
    let sd = if n > 1 {
        (ensemble.variance() * n as f64 / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = ensemble.positions.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| {
        let h = p * (n - 1) as f64;
        let k = h.floor() as usize;
        let w = h - k as f64;
        if k + 1 < n {
            sorted[k] * (1.0 - w) + sorted[k + 1] * w
        } else {
            sorted[n - 1]
        }
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(invalid(
            "ensemble",
            "degenerate ensemble: Silverman bandwidth is zero",
        ))
    }
}

/// Gaussian kernel density estimate on `grid`, renormalized to unit
/// trapezoidal mass. Kernels are truncated at ten bandwidths.
pub fn density_from_ensemble(
    ensemble: &EmpiricalEnsemble,
    grid: GridSpec,
    bandwidth: f64,
) -> Result<GridDensity> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(invalid(
            "bandwidth",
            format!("kernel bandwidth must be positive, got {bandwidth}"),
        ));
    }
    let mut values = vec![0.0; grid.len()];
    let norm = 1.0 / (ensemble.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let reach = KDE_CUTOFF * bandwidth;
    let last = (grid.len() - 1) as isize;
    for &p in &ensemble.positions {
        let lo = (((p - reach) - grid.x_min) / grid.dx).ceil().max(0.0) as isize;
        let hi = ((((p + reach) - grid.x_min) / grid.dx).floor() as isize).min(last);
        for i in lo..=hi {
            let i = i as usize;
            let z = (grid.x(i) - p) / bandwidth;
            values[i] += norm * (-0.5 * z * z).exp();
        }
    }
    let mass = trapezoid(&grid, &values);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(invalid(
            "grid",
            "no kernel mass falls on the grid; widen the grid or the bandwidth",
        ));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(GridDensity::from_trusted(
        grid,
        values,
        DEFAULT_MASS_TOLERANCE,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(x_min: f64, x_max: f64, dx: f64) -> GridSpec {
        GridSpec::new(x_min, x_max, dx).unwrap()
    }

    #[test]
    fn grid_rejects_non_dividing_spacing() {
        assert!(GridSpec::new(0.0, 1.0, 0.3).is_err());
        assert_eq!(GridSpec::new(-8.0, 8.0, 0.02).unwrap().len(), 801);
    }

    #[test]
    fn uniform_density_mean_is_one_half() {
        let m = GridDensity::from_fn(grid(0.0, 1.0, 0.001), |_| 1.0).unwrap();
        let mean = m.pairing(&TestPolynomial::identity()).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        let mass = m.pairing(&TestPolynomial::constant(1.0)).unwrap();
        assert!((mass - 1.0).abs() <= m.tol_mass());
    }

    #[test]
    fn gaussian_second_moment() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.01), 0.0, 1.0).unwrap();
        let q = TestPolynomial::monomial(2).unwrap();
        assert!((m.pairing(&q).unwrap() - 1.0).abs() < 1e-3);
        // The law view and the direct quadrature agree.
        assert!((m.view().pairing(&q) - m.pairing(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pairing_reports_overflowing_cell() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.01), 0.0, 1.0).unwrap();
        let err = m
            .expectation(|x| if x > 7.99 { f64::INFINITY } else { 1.0 })
            .unwrap_err();
        assert!(err.to_string().contains("grid cell 1600"), "{err}");
        let e = EmpiricalEnsemble::new(vec![0.0, 1e200]).unwrap_err();
        assert!(e.to_string().contains("second moment"));
        let e = EmpiricalEnsemble::new(vec![0.0, 1.0, 2.0]).unwrap();
        let err = e.expectation(|x| 1.0 / (x - 1.0)).unwrap_err();
        assert!(err.to_string().contains("particle 1"), "{err}");
    }

    #[test]
    fn density_invariants_are_enforced() {
        let g = grid(0.0, 1.0, 0.1);
        assert!(GridDensity::from_fn(g, |_| 2.0).is_err());
        let mut v = vec![1.0; g.len()];
        v[3] = -0.1;
        assert!(GridDensity::new(g, v).is_err());
        assert!(TestPolynomial::new(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).is_err());
        assert_eq!(
            TestPolynomial::new(vec![1.0, 2.0, 0.0, 0.0])
                .unwrap()
                .degree(),
            1
        );
    }

    #[test]
    fn k_norm_of_standard_normal() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.01), 0.0, 1.0).unwrap();
        assert!((m.k_norm() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn zero_shift_is_identity() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.01), 0.0, 1.0).unwrap();
        let s = m.gamma_shift(0.0).unwrap();
        assert_eq!(s.density.values(), m.values());
        assert_eq!(s.lost_mass, 0.0);
    }

    #[test]
    fn unit_shift_of_standard_normal() {
        let dx = 0.01;
        let m = GridDensity::normal(grid(-8.0, 8.0, dx), 0.0, 1.0).unwrap();
        let shifted = m.gamma_shift(1.0).unwrap().density;
        let max_err = shifted
            .grid()
            .points()
            .zip(shifted.values())
            .map(|(x, v)| (v - normal_pdf(x, 1.0, 1.0)).abs())
            .fold(0.0, f64::max);
        // |m''| <= 0.4 for the standard normal; linear interpolation error
        // is at most dx^2 |m''| / 8.
        assert!(max_err <= 0.4 * dx * dx / 8.0 + 1e-12, "{max_err}");
    }

    #[test]
    fn non_aligned_shift_has_second_order_error() {
        // Offsets of 1/3 and 2/3 cell give the same interpolation constant.
        let gamma = 0.24 + 0.04 / 3.0;
        let errs: Vec<f64> = [0.04, 0.02]
            .iter()
            .map(|&dx| {
                let m = GridDensity::normal(grid(-8.0, 8.0, dx), 0.0, 1.0).unwrap();
                let s = m.gamma_shift(gamma).unwrap().density;
                s.grid()
                    .points()
                    .zip(s.values())
                    .map(|(x, v)| (v - normal_pdf(x, gamma, 1.0)).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!((3.0..5.0).contains(&ratio), "{errs:?}");
    }

    #[test]
    fn shift_duality_with_translated_test_function() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.01), 0.0, 1.0).unwrap();
        let q = TestPolynomial::identity();
        let shifted = m.gamma_shift(0.5).unwrap().density;
        let lhs = shifted.pairing(&q).unwrap();
        let rhs = m.pairing(&q.shifted(0.5)).unwrap();
        assert!((lhs - 0.5).abs() < 1e-3);
        assert!((rhs - 0.5).abs() < 1e-3);
    }

    #[test]
    fn shift_beyond_grid_is_a_domain_error() {
        let m = GridDensity::normal(grid(-8.0, 8.0, 0.1), 0.0, 1.0).unwrap();
        assert!(matches!(m.gamma_shift(16.0), Err(Error::Domain(_))));
        let s = m.gamma_shift(7.0).unwrap();
        // P(N(7, 1) > 8) = 0.158655...
        assert!((s.lost_mass - 0.158655).abs() < 1e-3, "{}", s.lost_mass);
    }

    #[test]
    fn shift_composition() {
        let dx = 0.01;
        let m = GridDensity::normal(grid(-8.0, 8.0, dx), 0.0, 1.0).unwrap();
        let (g1, g2) = (0.123, 0.456);
        let twice = m
            .gamma_shift(g1)
            .unwrap()
            .density
            .gamma_shift(g2)
            .unwrap()
            .density;
        let once = m.gamma_shift(g1 + g2).unwrap().density;
        let tol = 2.0 * 0.4 * dx * dx / 8.0;
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() <= 2.0 * tol, "{a} vs {b}");
        }
    }

    #[test]
    fn characteristic_function_basics() {
        let e = EmpiricalEnsemble::new(vec![-1.3, 0.2, 2.7]).unwrap();
        assert_eq!(e.characteristic_function(0.0), Complex64::new(1.0, 0.0));
        let point = EmpiricalEnsemble::new(vec![2.0; 4]).unwrap();
        let v = point.characteristic_function(std::f64::consts::PI);
        assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn silverman_rejects_degenerate_ensembles() {
        let e = EmpiricalEnsemble::new(vec![1.0; 10]).unwrap();
        assert!(silverman_bandwidth(&e).is_err());
        assert!(density_from_ensemble(&e, grid(-2.0, 2.0, 0.1), 0.0).is_err());
        let spread = EmpiricalEnsemble::new((0..100).map(|i| i as f64 / 10.0).collect()).unwrap();
        assert!(silverman_bandwidth(&spread).unwrap() > 0.0);
    }

    #[test]
    fn kde_of_single_particle_is_gaussian() {
        let e = EmpiricalEnsemble::new(vec![0.0]).unwrap();
        let h = 0.5;
        let m = density_from_ensemble(&e, grid(-8.0, 8.0, 0.01), h).unwrap();
        for (x, v) in m.grid().points().zip(m.values()) {
            assert!((v - normal_pdf(x, 0.0, h)).abs() < 1e-9);
        }
        assert!((m.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_headers() {
        let m = GridDensity::from_fn(grid(0.0, 1.0, 0.5), |_| 1.0).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,density\n"));
        assert_eq!(GridDensity::read_csv(buf.as_slice()).unwrap(), m);
        let e = EmpiricalEnsemble::new(vec![0.5, -1.25]).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "particle_index,position\n0,0.5\n1,-1.25\n"
        );
        assert_eq!(EmpiricalEnsemble::read_csv(buf.as_slice()).unwrap(), e);
    }

    fn poly() -> impl Strategy<Value = TestPolynomial> {
        prop::collection::vec(-3.0f64..3.0, 1..=5).prop_map(|c| TestPolynomial::new(c).unwrap())
    }

    proptest! {
        #[test]
        fn pairing_is_linear(p in poly(), q in poly(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = GridDensity::normal(grid(-6.0, 6.0, 0.05), 0.3, 0.8).unwrap();
            let lhs = m.pairing(&TestPolynomial::combine(a, &p, b, &q)).unwrap();
            let rhs = a * m.pairing(&p).unwrap() + b * m.pairing(&q).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn characteristic_function_is_conjugate_symmetric(
            xs in prop::collection::vec(-50.0f64..50.0, 1..40),
            y in -20.0f64..20.0,
        ) {
            let e = EmpiricalEnsemble::new(xs).unwrap();
            let a = e.characteristic_function(y);
            let b = e.characteristic_function(-y);
            prop_assert_eq!(a, b.conj());
            prop_assert!(a.norm() <= 1.0 + 1e-12);
        }

        #[test]
        fn shifted_polynomial_matches_evaluation(p in poly(), g in -2.0f64..2.0, x in -3.0f64..3.0) {
            let lhs = p.shifted(g).eval(x);
            let rhs = p.eval(x + g);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn kde_integrates_to_one(xs in prop::collection::vec(-3.0f64..3.0, 1..30), h in 0.05f64..1.0) {
            let e = EmpiricalEnsemble::new(xs).unwrap();
            let m = density_from_ensemble(&e, grid(-8.0, 8.0, 0.02), h).unwrap();
            prop_assert!((m.mass() - 1.0).abs() <= 1e-12);
            prop_assert!(m.values().iter().all(|v| *v >= 0.0));
        }
    }
}
