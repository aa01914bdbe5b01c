//! Particle-based powder simulation, angle-of-repose calibration and
//! flowability-ordered training of a weighing policy.

pub mod calibrate;
pub mod env;
pub mod lab;
pub mod rng;
pub mod sac;
pub mod sim;
pub mod trainer;

pub use calibrate::{AcceptedSets, CalibrationConfig, CalibrationHistory, EvalRecord};
pub use env::{Action, EnvSettings, EpisodeConfig, Observation, WeighingEnv};
pub use lab::{AoRScene, MaterialTarget, PileMetrics};
pub use sac::{PolicyState, SacConfig};
pub use sim::{Param, SimParams, SolverConfig};
pub use trainer::{CurriculumConfig, EvalReport, LevelSet, Ordering};
