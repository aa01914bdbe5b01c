//! Position-based dynamics for monodisperse spherical particles.
//!
//! A step damps and gravitates velocities, predicts positions, rebuilds a
//! spatial hash, then runs a fixed number of Gauss-Seidel passes over
//! particle-particle contacts (with friction and cohesion) and
//! particle-collider contacts (with friction and adhesion), in index order.
//! Velocities are recovered from the position change.

mod collider;
mod grid;
mod params;
mod system;

pub use collider::{Collider, Pose, Shape};
pub use grid::SpatialHash;
pub use params::{Param, SimParams, N_PARAMS, PARAMS_SCHEMA_VERSION, PARAM_BOUNDS};
pub use system::{
    lattice_capacity, lattice_sites, max_height_over_base, Aabb, ColliderId, ParticleSystem, SolverConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    ParamOutOfBounds {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("region too small: {requested} particles requested, lattice holds {capacity}")]
    RegionTooSmall { requested: usize, capacity: usize },
    #[error("numerical blowup at step {step} (particle {particle})")]
    NumericalBlowup { step: u64, particle: usize },
    #[error("collider {id} is a {found}, expected a {expected}")]
    WrongShape {
        id: usize,
        expected: &'static str,
        found: &'static str,
    },
    #[error("no collider with id {0}")]
    NoSuchCollider(usize),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}
