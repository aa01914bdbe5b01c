//! Virtual angle-of-repose tester.
//!
//! A closed funnel is filled, its gate is opened above a circular platform,
//! and once the pour has settled the pile height is read off the highest
//! particle centre over the platform.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    lattice_capacity, max_height_over_base, Aabb, Collider, ParticleSystem, Pose, Shape, SimError, SimParams,
    SolverConfig,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("funnel jammed: {exited} of {total} particles left the funnel before the pour timeout")]
    Jam { exited: usize, total: usize },
    #[error("unknown material {0:?}")]
    UnknownMaterial(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("materials file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Angle of repose in degrees from pile height and base diameter:
/// `atan(2h / d_base)`.
pub fn aor_from_height(h: f64, d_base: f64) -> Result<f64, LabError> {
    if !(d_base > 0.0) {
        return Err(LabError::Domain(format!("base diameter must be positive, got {d_base}")));
    }
    if !(h >= 0.0) {
        return Err(LabError::Domain(format!("pile height must be non-negative, got {h}")));
    }
    Ok((2.0 * h / d_base).atan().to_degrees())
}

/// Pile height from the funnel-tip and pile-apex points and the known
/// tip-to-platform distance: `D - |apex - tip|`. May be negative for
/// inconsistent inputs.
pub fn pile_height_from_points(apex: &Vector3<f64>, tip: &Vector3<f64>, drop_distance: f64) -> f64 {
    drop_distance - (apex - tip).norm()
}

/// Geometry and timing of the virtual tester. Lengths are world metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AoRScene {
    pub funnel_exit_diameter: f64,
    pub funnel_top_diameter: f64,
    pub funnel_cone_height: f64,
    pub funnel_collar_height: f64,
    pub wall_thickness: f64,
    /// Platform diameter `d_base`.
    pub base_diameter: f64,
    pub platform_thickness: f64,
    /// Vertical distance `D` from the funnel tip down to the platform top.
    pub drop_distance: f64,
    /// Number of particles loaded into the funnel.
    pub load_count: usize,
    /// Speed below which the pile is considered at rest (m/s).
    pub v_eps: f64,
    pub fill_settle_steps: usize,
    pub pour_timeout_steps: usize,
    pub final_settle_steps: usize,
    /// The funnel is raised whenever the pile apex comes closer than this to
    /// its tip.
    pub tip_clearance: f64,
    /// Largest total rise of the funnel.
    pub max_lift: f64,
    /// Rate at which the funnel is raised (m/s).
    pub lift_speed: f64,
    /// Steps without any particle leaving the funnel before vibration starts.
    pub stall_steps: usize,
    pub vibration_amplitude: f64,
    pub vibration_frequency: f64,
}

impl Default for AoRScene {
    fn default() -> Self {
        AoRScene {
            funnel_exit_diameter: 0.07,
            funnel_top_diameter: 0.2,
            funnel_cone_height: 0.08,
            funnel_collar_height: 0.25,
            wall_thickness: 0.006,
            base_diameter: 0.2,
            platform_thickness: 0.03,
            drop_distance: 0.1,
            load_count: 1500,
            v_eps: 0.005,
            fill_settle_steps: 120,
            pour_timeout_steps: 1440,
            final_settle_steps: 600,
            tip_clearance: 0.03,
            lift_speed: 0.1,
            max_lift: 0.1,
            stall_steps: 48,
            vibration_amplitude: 0.003,
            vibration_frequency: 12.0,
        }
    }
}

impl AoRScene {
    pub fn validate(&self, params: &SimParams, solver: &SolverConfig) -> Result<(), LabError> {
        let positive = [
            ("funnel_exit_diameter", self.funnel_exit_diameter),
            ("funnel_top_diameter", self.funnel_top_diameter),
            ("funnel_cone_height", self.funnel_cone_height),
            ("funnel_collar_height", self.funnel_collar_height),
            ("wall_thickness", self.wall_thickness),
            ("base_diameter", self.base_diameter),
            ("platform_thickness", self.platform_thickness),
            ("drop_distance", self.drop_distance),
            ("v_eps", self.v_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::InvalidScene(format!("{name} must be positive, got {v}")));
            }
        }
        if self.load_count == 0 {
            return Err(LabError::InvalidScene("load_count must be at least 1".into()));
        }
        let d = solver.diameter(params);
        if self.funnel_exit_diameter <= d {
            return Err(LabError::InvalidScene(format!(
                "funnel exit {} m not wider than particle diameter {d} m",
                self.funnel_exit_diameter
            )));
        }
        if self.funnel_top_diameter < self.funnel_exit_diameter {
            return Err(LabError::InvalidScene("funnel top narrower than its exit".into()));
        }
        let region = self.fill_region(d);
        let cap = lattice_capacity(region.extents().x, d)
            * lattice_capacity(region.extents().y, d)
            * lattice_capacity(region.extents().z, d);
        if cap < self.load_count {
            return Err(LabError::InvalidScene(format!(
                "funnel collar holds {cap} particles, {} requested",
                self.load_count
            )));
        }
        Ok(())
    }

    /// World position of the funnel exit centre.
    pub fn funnel_tip(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.drop_distance)
    }

    /// Centre of the platform's top face.
    pub fn base_center(&self) -> Vector3<f64> {
        Vector3::zeros()
    }

    fn fill_region(&self, d: f64) -> Aabb {
        let inner = 0.5 * self.funnel_top_diameter - 0.5 * self.wall_thickness - 0.5 * d;
        let half = inner / std::f64::consts::SQRT_2;
        let z0 = self.drop_distance + self.funnel_cone_height;
        Aabb::new(
            Vector3::new(-half, -half, z0),
            Vector3::new(half, half, z0 + self.funnel_collar_height),
        )
    }

    fn colliders(&self) -> Result<(Collider, Collider), SimError> {
        let funnel = Collider::new(
            Shape::Funnel {
                exit_radius: 0.5 * self.funnel_exit_diameter,
                top_radius: 0.5 * self.funnel_top_diameter,
                cone_height: self.funnel_cone_height,
                collar_height: self.funnel_collar_height,
                wall_thickness: self.wall_thickness,
            },
            Pose::from_translation(self.funnel_tip()),
        )?;
        let platform = Collider::new(
            Shape::Cylinder {
                radius: 0.5 * self.base_diameter,
                half_height: 0.5 * self.platform_thickness,
            },
            Pose::from_translation(Vector3::new(0.0, 0.0, -0.5 * self.platform_thickness)),
        )?;
        Ok((funnel, platform))
    }
}

/// Geometry of a measured pile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PileMetrics {
    /// Pile height `h` in metres.
    pub height: f64,
    /// Platform diameter `d_base` in metres.
    pub base_diameter: f64,
    pub aor_degrees: f64,
    /// The raw ratio `2h / d_base`, i.e. the tangent of the angle.
    pub aor_ratio: f64,
    /// Highest particle centre over the platform.
    pub apex: [f64; 3],
    /// Particles that left the funnel.
    pub exited: usize,
    /// Simulated steps over the whole task.
    pub steps: u64,
}

/// Fills the funnel, pours onto the platform and measures the pile.
pub fn run_aor_task(
    params: &SimParams,
    scene: &AoRScene,
    solver: &SolverConfig,
    seed: u64,
) -> Result<PileMetrics, LabError> {
    params.validate()?;
    scene.validate(params, solver)?;
    let mut sys = ParticleSystem::new(*params, solver.clone(), seed)?;
    let (funnel, platform) = scene.colliders()?;
    let funnel_pose = funnel.pose;
    let funnel_id = sys.add_collider(funnel);
    sys.add_collider(platform);

    let d = sys.diameter();
    let sites = crate::sim::lattice_sites(&scene.fill_region(d), d, scene.load_count, seed)?;
    sys.add_particles(&sites);
    sys.settle(scene.v_eps, scene.fill_settle_steps)?;

    let spill_z = -2.0 * d;
    let base = scene.base_center();
    let base_r = 0.5 * scene.base_diameter;
    // Pile particles: active, below the funnel tip and not touching the funnel.
    let in_pile = |s: &ParticleSystem, i: usize, tip_z: f64| {
        let p = &s.positions()[i];
        !s.is_retired(i) && p.z < tip_z && s.colliders()[funnel_id].sdf(p).0 > 2.5 * d
    };
    let below = |s: &ParticleSystem, tip_z: f64| {
        max_height_over_base(s.positions(), &base, base_r, |i| in_pile(s, i, tip_z))
    };
    let in_funnel = |s: &ParticleSystem, tip_z: f64| {
        s.positions()
            .iter()
            .enumerate()
            .filter(|(i, p)| !s.is_retired(*i) && p.z > tip_z)
            .count()
    };

    sys.set_gate(funnel_id, true)?;
    let total = scene.load_count;
    let lift_step = scene.lift_speed * solver.dt;
    let mut lift = 0.0;
    let mut last_exit_count = 0;
    let mut last_exit_step = 0;
    let mut vibrating_since: Option<usize> = None;
    let mut step = 0;
    while step < scene.pour_timeout_steps {
        let tip_z = scene.drop_distance + lift;
        if lift < scene.max_lift && below(&sys, tip_z) > tip_z - scene.tip_clearance {
            lift += lift_step;
        }
        let mut pose = funnel_pose;
        pose.position.z += lift;
        if let Some(t0) = vibrating_since {
            let t = (step - t0) as f64 * solver.dt;
            pose.position.x += scene.vibration_amplitude * (std::f64::consts::TAU * scene.vibration_frequency * t).sin();
        }
        sys.collider_mut(funnel_id).expect("funnel").set_pose(pose);
        sys.step()?;
        step += 1;
        sys.retire_where(|p| p.z < spill_z);
        let remaining = in_funnel(&sys, scene.drop_distance + lift);
        let exited = total - remaining;
        if exited > last_exit_count {
            last_exit_count = exited;
            last_exit_step = step;
        }
        if remaining == 0 {
            break;
        }
        let stalled_for = step - last_exit_step;
        match vibrating_since {
            None if stalled_for >= scene.stall_steps => vibrating_since = Some(step),
            Some(t0) if step - t0 >= 4 * scene.stall_steps && stalled_for >= 4 * scene.stall_steps => break,
            _ => {}
        }
    }
    let tip_z = scene.drop_distance + lift;
    let mut pose = funnel_pose;
    pose.position.z += lift;
    sys.collider_mut(funnel_id).expect("funnel").set_pose(pose);
    let exited = total - in_funnel(&sys, tip_z);
    if 2 * exited < total {
        return Err(LabError::Jam { exited, total });
    }

    let mut used = 0;
    while used < scene.final_settle_steps {
        sys.step()?;
        used += 1;
        sys.retire_where(|p| p.z < spill_z);
        if sys.max_speed() < scene.v_eps {
            break;
        }
    }

    let positions = sys.positions();
    let height = below(&sys, tip_z);
    let apex = positions
        .iter()
        .enumerate()
        .filter(|&(i, p)| {
            in_pile(&sys, i, tip_z) && (p.x - base.x).powi(2) + (p.y - base.y).powi(2) <= base_r * base_r
        })
        .map(|(_, p)| p)
        .max_by(|a, b| a.z.total_cmp(&b.z))
        .map(|p| [p.x, p.y, p.z])
        .unwrap_or([base.x, base.y, base.z]);
    let aor_degrees = aor_from_height(height, scene.base_diameter)?;
    Ok(PileMetrics {
        height,
        base_diameter: scene.base_diameter,
        aor_degrees,
        aor_ratio: 2.0 * height / scene.base_diameter,
        apex,
        exited,
        steps: sys.step_count(),
    })
}

/// Source of a target angle of repose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    Table2,
    Synthetic,
}

/// One material's measured angle of repose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialTarget {
    pub name: String,
    pub aor_degrees_mean: f64,
    pub aor_degrees_std: f64,
    pub source: TargetSource,
}

const BUNDLED_MATERIALS: &str = include_str!("../data/materials.json");

/// The automated-tester measurements shipped with the crate.
pub fn bundled_materials() -> Vec<MaterialTarget> {
    serde_json::from_str(BUNDLED_MATERIALS).expect("bundled materials file is valid")
}

pub fn parse_materials(json: &str) -> Result<Vec<MaterialTarget>, LabError> {
    Ok(serde_json::from_str(json)?)
}

/// Looks a material up by case-insensitive name.
pub fn find_material<'a>(materials: &'a [MaterialTarget], name: &str) -> Result<&'a MaterialTarget, LabError> {
    let key = name.trim().to_lowercase().replace(['_', '-'], " ");
    materials
        .iter()
        .find(|m| m.name.to_lowercase() == key)
        .ok_or_else(|| LabError::UnknownMaterial(name.to_string()))
}

/// The real-world target angle of repose for a measurement record.
pub fn measure_a_real(record: &MaterialTarget) -> Result<f64, LabError> {
    if !record.aor_degrees_mean.is_finite() {
        return Err(LabError::Domain(format!("non-finite AoR for {}", record.name)));
    }
    Ok(record.aor_degrees_mean)
}
