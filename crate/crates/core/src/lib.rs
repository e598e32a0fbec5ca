//! Numerical laboratory for McKean-Vlasov (mean-field) jump diffusions.
//!
//! * [`measures`]: grid densities, particle ensembles, test polynomials.
//! * [`jumps`]: finite-activity Lévy measures.
//! * [`dynamics`]: particle simulation and the Feynman-Kac density estimator.
//! * [`fokker_planck`]: the adjoint operator, an explicit density solver and
//!   a characteristic-function consistency check.
//! * [`hjb`]: generator evaluation on cylindrical value functions, HJB,
//!   HJBI and Nash verification, performance estimation.
//! * [`closed_forms`]: the linear-quadratic and log-consumption benchmarks.

pub mod closed_forms;
pub mod dynamics;
mod error;
pub mod fokker_planck;
pub mod hjb;
pub mod jumps;
pub mod measures;
pub mod rng;

pub use error::{Error, Result};
