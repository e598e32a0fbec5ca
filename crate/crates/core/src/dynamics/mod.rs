//! Controlled McKean-Vlasov jump dynamics: coefficient models, feedback
//! policies, the interacting-particle simulator and the Feynman-Kac path
//! estimator for the density.

mod feynman_kac;
mod model;
mod particles;

pub use feynman_kac::{feynman_kac_density, FeynmanKacConfig, FeynmanKacEstimate, LawTrajectory};
pub use model::{abc_coefficients, AbcCoefficients, CoefficientModel, ControlPolicy};
pub use particles::{
    simulate_particles, ControlSummary, SimulationConfig, SimulationResult, DIVERGENCE_GUARD,
};

pub(crate) use particles::{time_grid, ParticleSystem};
