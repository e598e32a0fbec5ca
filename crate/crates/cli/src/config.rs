//! JSON scenario configuration and the coefficient preset registry.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mvjump::dynamics::{CoefficientModel, ControlPolicy};
use mvjump::jumps::{JumpAtom, JumpMeasure};
use mvjump::measures::{GridDensity, GridSpec, LawView};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    SolveFp,
    FeynmanKac,
    CheckCharacteristic,
    VerifyHjb,
    VerifyHjbi,
    VerifyNash,
    LqBenchmark,
    ConsumptionBenchmark,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub kind: Kind,
    #[serde(default)]
    pub seed: Option<u64>,
    pub horizon: Horizon,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub particles: Option<Particles>,
    #[serde(default)]
    pub model: Option<Model>,
    #[serde(default)]
    pub jumps: Option<Jumps>,
    #[serde(default)]
    pub control: Control,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Initial density for the grid-based kinds.
    #[serde(default)]
    pub initial: Option<Initial>,
    /// Points (or frequencies, for `check_characteristic`) to report at.
    #[serde(default)]
    pub probes: Option<Vec<f64>>,
    /// Evaluation box for the verification kinds.
    #[serde(default)]
    pub eval: Option<Eval>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    #[serde(rename = "T")]
    pub t: f64,
    pub dt: f64,
    #[serde(default)]
    pub record_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Particles {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub x0: Option<f64>,
    /// Time step of the particle paths when it differs from `horizon.dt`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub alpha: Preset,
    pub beta: Preset,
    pub gamma: Preset,
}

/// Named coefficient family. For `gamma` the preset gives the amplitude per
/// unit mark, `gamma(zeta) = zeta g(t, m, u)`, and may not depend on `x`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Preset {
    Constant {
        value: f64,
    },
    /// `intercept + slope x`.
    Linear {
        #[serde(default)]
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// `x X + mean <m, x> + control u + constant`.
    MeanFieldLinear {
        #[serde(default)]
        x: f64,
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        control: f64,
        #[serde(default)]
        constant: f64,
    },
    /// `alpha = u`, `beta = sigma <m, x>`, `gamma = zeta <m, x>`.
    Lq {
        #[serde(default)]
        sigma: f64,
    },
    /// `alpha = (rho - u) <m, x>`, `beta = sigma0 <m, x>`,
    /// `gamma = zeta <m, x>`.
    Consumption {
        #[serde(default)]
        rho: f64,
        #[serde(default)]
        sigma0: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jumps {
    pub atoms: Vec<Atom>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub zeta: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control {
    #[serde(default)]
    pub policy: Option<Policy>,
    /// Finite control set searched by the verification kinds.
    #[serde(default)]
    pub grid: Option<ControlRange>,
    /// Perturbation of the candidate (player 1 in `verify_hjbi`, player 2
    /// in `verify_nash`).
    #[serde(default)]
    pub shift: f64,
    /// Policy shifts (LQ) or relative consumption changes whose cost must
    /// not beat the candidate.
    #[serde(default)]
    pub deltas: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default = "unit")]
    pub k1_scale: f64,
    #[serde(default = "yes")]
    pub jump_corrected: bool,
}

impl Default for Control {
    fn default() -> Self {
        Self {
            policy: None,
            grid: None,
            shift: 0.0,
            deltas: None,
            theta: None,
            k1_scale: unit(),
            jump_corrected: yes(),
        }
    }
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRange {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Policy {
    Constant {
        value: f64,
    },
    /// `x X + mean <m, x> + constant`, clamped to `bounds` when given.
    Linear {
        #[serde(default)]
        x: f64,
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        bounds: Option<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "Tolerances::hjb")]
    pub hjb: f64,
    #[serde(default = "Tolerances::l1")]
    pub l1: f64,
    #[serde(default = "Tolerances::mass")]
    pub mass: f64,
    /// Additive slack of Monte Carlo comparisons on top of `sigmas` SE.
    #[serde(default = "Tolerances::mc_slack")]
    pub mc_slack: f64,
    #[serde(default = "Tolerances::sigmas")]
    pub sigmas: f64,
    #[serde(default = "Tolerances::characteristic_slack")]
    pub characteristic_slack: f64,
    #[serde(default = "Tolerances::value")]
    pub value: f64,
}

impl Tolerances {
    fn hjb() -> f64 {
        1e-3
    }
    fn l1() -> f64 {
        1e-2
    }
    fn mass() -> f64 {
        1e-3
    }
    fn mc_slack() -> f64 {
        1e-2
    }
    fn sigmas() -> f64 {
        3.0
    }
    fn characteristic_slack() -> f64 {
        0.05
    }
    fn value() -> f64 {
        1e-6
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hjb: Self::hjb(),
            l1: Self::l1(),
            mass: Self::mass(),
            mc_slack: Self::mc_slack(),
            sigmas: Self::sigmas(),
            characteristic_slack: Self::characteristic_slack(),
            value: Self::value(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Initial {
    Normal { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    pub n_s: usize,
    pub x_max: f64,
    pub n_x: usize,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mean: f64,
    pub std: f64,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                anyhow!("invalid config: {}", e.inner())
            } else {
                anyhow!("invalid config at `{path}`: {}", e.inner())
            }
        })
    }

    pub fn particles(&self) -> Result<&Particles> {
        self.particles
            .as_ref()
            .ok_or_else(|| missing("particles", self.kind))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let g = self.grid.ok_or_else(|| missing("grid", self.kind))?;
        GridSpec::new(g.x_min, g.x_max, g.dx).context("invalid config at `grid`")
    }

    pub fn model(&self) -> Result<&Model> {
        self.model
            .as_ref()
            .ok_or_else(|| missing("model", self.kind))
    }

    pub fn nu(&self) -> Result<JumpMeasure> {
        match &self.jumps {
            None => Ok(JumpMeasure::none()),
            Some(j) => JumpMeasure::new(
                j.atoms
                    .iter()
                    .map(|a| JumpAtom {
                        zeta: a.zeta,
                        intensity: a.intensity,
                    })
                    .collect(),
            )
            .context("invalid config at `jumps.atoms`"),
        }
    }

    pub fn initial_density(&self) -> Result<GridDensity> {
        let grid = self.grid()?;
        match self.initial.ok_or_else(|| missing("initial", self.kind))? {
            Initial::Normal { mean, std } => {
                GridDensity::normal(grid, mean, std).context("invalid config at `initial.normal`")
            }
        }
    }

    pub fn coefficients(&self) -> Result<CoefficientModel> {
        let m = self.model()?;
        check_gamma(&m.gamma)?;
        let (a, b, g) = (m.alpha.clone(), m.beta.clone(), m.gamma.clone());
        CoefficientModel::new(
            move |t, x, law: &LawView, u: f64| a.drift(t, x, law, u),
            move |t, x, law: &LawView, u| b.volatility(x, law, u, t),
            move |_, law: &LawView, u, zeta| zeta * g.amplitude(law, u),
        )
        .context("invalid config at `model`")
    }

    pub fn policy(&self) -> Result<ControlPolicy> {
        Ok(match self.control.policy.clone() {
            None => ControlPolicy::constant(0.0),
            Some(Policy::Constant { value }) => ControlPolicy::constant(value),
            Some(Policy::Linear {
                x,
                mean,
                constant,
                bounds,
            }) => {
                let rule = move |_: f64, y: f64, law: &LawView| -> mvjump::Result<f64> {
                    Ok(x * y + mean * law.mean() + constant)
                };
                match bounds {
                    None => ControlPolicy::unbounded(rule),
                    Some([lo, hi]) => ControlPolicy::new(lo, hi, rule)
                        .context("invalid config at `control.policy.bounds`")?,
                }
            }
        })
    }
}

fn missing(section: &str, kind: Kind) -> anyhow::Error {
    anyhow!("invalid config: `{section}` is required for kind {kind:?}")
}

fn check_gamma(p: &Preset) -> Result<()> {
    match p {
        Preset::Linear { slope, .. } if *slope != 0.0 => {
            bail!("invalid config at `model.gamma.slope`: jump amplitudes cannot depend on x")
        }
        Preset::MeanFieldLinear { x, .. } if *x != 0.0 => {
            bail!("invalid config at `model.gamma.x`: jump amplitudes cannot depend on x")
        }
        _ => Ok(()),
    }
}

impl Preset {
    fn drift(&self, _t: f64, x: f64, law: &LawView, u: f64) -> f64 {
        match *self {
            Preset::Constant { value } => value,
            Preset::Linear { slope, intercept } => intercept + slope * x,
            Preset::MeanFieldLinear {
                x: a,
                mean,
                control,
                constant,
            } => a * x + mean * law.mean() + control * u + constant,
            Preset::Lq { .. } => u,
            Preset::Consumption { rho, .. } => (rho - u) * law.mean(),
        }
    }

    fn volatility(&self, x: f64, law: &LawView, u: f64, t: f64) -> f64 {
        match *self {
            Preset::Lq { sigma } => sigma * law.mean(),
            Preset::Consumption { sigma0, .. } => sigma0 * law.mean(),
            _ => self.drift(t, x, law, u),
        }
    }

    fn amplitude(&self, law: &LawView, u: f64) -> f64 {
        match *self {
            Preset::Lq { .. } | Preset::Consumption { .. } => law.mean(),
            _ => self.drift(0.0, 0.0, law, u),
        }
    }

    /// The value of a preset that does not vary with state, law or control.
    pub fn constant_value(&self) -> Option<f64> {
        match *self {
            Preset::Constant { value } => Some(value),
            Preset::Linear {
                slope: 0.0,
                intercept,
            } => Some(intercept),
            _ => None,
        }
    }
}
