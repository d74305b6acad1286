//! Effective classical potential of a particle in curved space, computed
//! perturbatively to two loops by three independent routes.

pub mod expr;
pub mod geometry;
pub mod jet;
mod linalg;
pub mod metricspec;

pub use jet::Jet3;
pub mod normal_coords;
pub mod propagator;
pub mod wick_engine;
pub mod ecp;
pub mod montecarlo;
