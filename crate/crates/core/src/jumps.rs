//! Finite-activity Lévy measures as weighted atoms.

use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One atom `(zeta, nu({zeta}))` of the jump measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpAtom {
    pub zeta: f64,
    pub intensity: f64,
}

#[derive(Deserialize)]
struct RawJumpMeasure {
    atoms: Vec<JumpAtom>,
}

/// Lévy measure `nu = sum_j nu_j delta_{zeta_j}` with finite total intensity.
///
/// Serializes as `{"atoms": [{"zeta": .., "intensity": ..}, ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawJumpMeasure")]
pub struct JumpMeasure {
    atoms: Vec<JumpAtom>,
    #[serde(skip)]
    total_intensity: f64,
}

impl TryFrom<RawJumpMeasure> for JumpMeasure {
    type Error = Error;

    fn try_from(raw: RawJumpMeasure) -> Result<Self> {
        JumpMeasure::new(raw.atoms)
    }
}

impl JumpMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        for (j, a) in atoms.iter().enumerate() {
            if !a.zeta.is_finite() {
                return Err(invalid("atoms", format!("atom {j} has non-finite mark")));
            }
            if !(a.intensity.is_finite() && a.intensity >= 0.0) {
                return Err(invalid(
                    "atoms",
                    format!("atom {j} has invalid intensity {}", a.intensity),
                ));
            }
        }
        let total_intensity = atoms.iter().map(|a| a.intensity).sum();
        let measure = Self {
            atoms,
            total_intensity,
        };
        if !measure.second_moment().is_finite() {
            return Err(invalid("atoms", "sum of zeta^2 nu must be finite"));
        }
        Ok(measure)
    }

    /// The zero measure: no jumps.
    pub fn none() -> Self {
        Self {
            atoms: Vec::new(),
            total_intensity: 0.0,
        }
    }

    pub fn single(zeta: f64, intensity: f64) -> Result<Self> {
        Self::new(vec![JumpAtom { zeta, intensity }])
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    /// `lambda = nu(R)`.
    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    pub fn is_zero(&self) -> bool {
        self.total_intensity == 0.0
    }

    /// `int zeta^2 nu(dzeta)`.
    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.zeta * a.zeta * a.intensity)
            .sum()
    }

    /// `int f dnu = sum_j f(zeta_j) nu_j`.
    pub fn integral(&self, f: impl Fn(f64) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (j, a) in self.atoms.iter().enumerate() {
            let v = f(a.zeta);
            if !v.is_finite() {
                return Err(Error::NumericalOverflow {
                    location: format!("jump atom {j} (zeta = {})", a.zeta),
                });
            }
            acc += v * a.intensity;
        }
        Ok(acc)
    }

    pub fn integral_complex(&self, f: impl Fn(f64) -> Complex64) -> Result<Complex64> {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, a) in self.atoms.iter().enumerate() {
            let v = f(a.zeta);
            if !v.is_finite() {
                return Err(Error::NumericalOverflow {
                    location: format!("jump atom {j} (zeta = {})", a.zeta),
                });
            }
            acc += v * a.intensity;
        }
        Ok(acc)
    }

    /// Marks arriving during an interval of length `dt`.
    pub fn sample_marks<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        let sampler = JumpSampler::new(self, dt)?;
        let mut marks = Vec::new();
        sampler.sample_into(rng, &mut marks);
        Ok(marks)
    }
}

/// Reusable sampler for the marks of a Poisson random measure over a fixed
/// step: a `Poisson(lambda dt)` count followed by i.i.d. marks drawn with
/// probabilities `nu_j / lambda`.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    marks: Vec<f64>,
    count: Option<Poisson<f64>>,
    index: Option<WeightedIndex<f64>>,
}

impl JumpSampler {
    pub fn new(nu: &JumpMeasure, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", "step must be positive"));
        }
        if nu.is_zero() {
            return Ok(Self {
                marks: Vec::new(),
                count: None,
                index: None,
            });
        }
        let lambda = nu.total_intensity * dt;
        let count = Poisson::new(lambda)
            .map_err(|e| invalid("atoms", format!("Poisson rate {lambda}: {e}")))?;
        let index = WeightedIndex::new(nu.atoms.iter().map(|a| a.intensity))
            .map_err(|e| invalid("atoms", e.to_string()))?;
        Ok(Self {
            marks: nu.atoms.iter().map(|a| a.zeta).collect(),
            count: Some(count),
            index: Some(index),
        })
    }

    /// Appends the sampled marks to `out`. Draws nothing from `rng` when the
    /// measure is zero.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        self.for_each_mark(rng, |z| out.push(z));
    }

    /// Calls `f` on every sampled mark, without allocating.
    #[inline]
    pub fn for_each_mark<R: Rng + ?Sized>(&self, rng: &mut R, mut f: impl FnMut(f64)) {
        let (Some(count), Some(index)) = (&self.count, &self.index) else {
            return;
        };
        let n = count.sample(rng) as usize;
        for _ in 0..n {
            f(self.marks[index.sample(rng)]);
        }
    }

    pub fn is_active(&self) -> bool {
        self.count.is_some()
    }
}
