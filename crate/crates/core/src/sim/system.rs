use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collider::{Collider, Shape};
use super::grid::SpatialHash;
use super::params::SimParams;
use super::SimError;

/// Fraction of a bonded pair's gap closed per iteration, per unit cohesion.
const COHESION_GAIN: f64 = 0.2;
/// Pairs closer than `d * (1 + BOND_SLACK)` at the start of a step are bonded
/// and attract each other until they separate past the cohesion radius.
const BOND_SLACK: f64 = 0.1;
/// Unbonded pairs farther apart than `d * (1 + CONTACT_MARGIN)` after
/// prediction are skipped for the step.
const CONTACT_MARGIN: f64 = 0.2;
/// Fraction of the gap to a nearby boundary closed per iteration, per unit
/// `adhesion * particle_adhesion_scale`. The pull tapers to zero at both ends
/// of the adhesion range.
const ADHESION_GAIN: f64 = 0.2;

/// Boundary attraction range in particle diameters at the largest admissible
/// `adhesion_offset_scale`.
const ADHESION_RANGE_AT_MAX: f64 = 0.5;
const ADHESION_OFFSET_MAX: f64 = 0.00005;

/// Axis-aligned box in world coordinates (metres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn from_center_half_extents(c: Vector3<f64>, h: Vector3<f64>) -> Self {
        Aabb::new(c - h, c + h)
    }

    pub fn extents(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Solver settings shared by every particle system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Time step in seconds.
    pub dt: f64,
    pub solver_iterations: u32,
    /// Neighbour cell size and cohesion reach, in particle diameters.
    pub cohesion_radius_multiplier: f64,
    /// Standard gravity before `gravity_scale`, m/s².
    pub gravity: f64,
    /// World metres per physical metre. Particles are simulated at
    /// `particle_diameter * length_scale` so that fixtures span tens of
    /// diameters instead of thousands.
    pub length_scale: f64,
    /// Reference time for the damping factor `1 - damping * dt / dt_ref`.
    pub damping_reference: f64,
    /// Largest admissible absolute coordinate before a step is declared unstable.
    pub world_bound: f64,
    /// Speed cap, in particle diameters per step.
    pub max_step_diameters: f64,
    /// Particles slower than this after a step are put back to their previous
    /// position (m/s). Zero disables sleeping.
    pub sleep_speed: f64,
    /// Height-dependent mass scaling for stacked contacts. The upper particle
    /// of a pair takes `0.5 + 0.5 t / (1 + t)` of each correction, where
    /// `t = shock_propagation * height difference / diameter`. Zero gives
    /// equal shares. Ignored without gravity.
    pub shock_propagation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 1.0 / 240.0,
            solver_iterations: 4,
            cohesion_radius_multiplier: 1.5,
            gravity: 9.81,
            length_scale: 40.0,
            damping_reference: 1.0,
            world_bound: 10.0,
            max_step_diameters: 0.5,
            sleep_speed: 0.0,
            shock_propagation: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("dt", self.dt),
            ("length_scale", self.length_scale),
            ("damping_reference", self.damping_reference),
            ("world_bound", self.world_bound),
            ("max_step_diameters", self.max_step_diameters),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.solver_iterations == 0 {
            return Err(SimError::InvalidConfig("solver_iterations must be at least 1".into()));
        }
        if !(self.cohesion_radius_multiplier >= 1.0 && self.cohesion_radius_multiplier.is_finite()) {
            return Err(SimError::InvalidConfig(
                "cohesion_radius_multiplier must be at least 1".into(),
            ));
        }
        if !(self.shock_propagation >= 0.0 && self.shock_propagation.is_finite()) {
            return Err(SimError::InvalidConfig("shock_propagation must be non-negative".into()));
        }
        if !(self.gravity.is_finite() && self.sleep_speed >= 0.0) {
            return Err(SimError::InvalidConfig("gravity and sleep_speed must be finite".into()));
        }
        Ok(())
    }

    /// Simulated particle diameter in world metres.
    pub fn diameter(&self, params: &SimParams) -> f64 {
        params.diameter_m() * self.length_scale
    }
}

/// Index of a collider inside a [`ParticleSystem`].
pub type ColliderId = usize;

/// Number of lattice sites along one axis of length `len` at spacing ≥ `d`.
pub fn lattice_capacity(len: f64, d: f64) -> usize {
    if len <= 0.0 || d <= 0.0 {
        return 0;
    }
    (len / d + 1e-9).floor() as usize
}

/// Jittered lattice placement of `count` particle centres inside `region`.
///
/// The region is divided into `floor(L/d)` equal slots per axis; each centre
/// is jittered inside its slot by at most half the slack so that no two
/// centres are closer than `d`. Sites fill bottom layer first and, inside a
/// layer, from the horizontal centre outward.
pub fn lattice_sites(
    region: &Aabb,
    diameter: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vector3<f64>>, SimError> {
    let ext = region.extents();
    let n = [
        lattice_capacity(ext.x, diameter),
        lattice_capacity(ext.y, diameter),
        lattice_capacity(ext.z, diameter),
    ];
    let capacity = n[0] * n[1] * n[2];
    if capacity < count {
        return Err(SimError::RegionTooSmall {
            requested: count,
            capacity,
        });
    }
    let spacing = Vector3::new(ext.x / n[0] as f64, ext.y / n[1] as f64, ext.z / n[2] as f64);
    let slack = spacing.map(|s| (0.5 * (s - diameter)).max(0.0));

    let mut layer: Vec<(usize, usize)> = (0..n[1])
        .flat_map(|iy| (0..n[0]).map(move |ix| (ix, iy)))
        .collect();
    let cx = 0.5 * (n[0] as f64 - 1.0);
    let cy = 0.5 * (n[1] as f64 - 1.0);
    let dist = |&(ix, iy): &(usize, usize)| {
        let dx = ix as f64 - cx;
        let dy = iy as f64 - cy;
        dx * dx + dy * dy
    };
    layer.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    'fill: for iz in 0..n[2] {
        for &(ix, iy) in &layer {
            if out.len() == count {
                break 'fill;
            }
            let idx = Vector3::new(ix as f64, iy as f64, iz as f64);
            let mut p = region.min + (idx + Vector3::repeat(0.5)).component_mul(&spacing);
            for k in 0..3 {
                if slack[k] > 0.0 {
                    p[k] += rng.gen_range(-slack[k]..=slack[k]);
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct PairState {
    i: u32,
    j: u32,
    /// Share of a pair correction taken by `i`.
    wi: f64,
    bonded: bool,
}

/// Monodisperse spherical particles advanced with position-based dynamics.
#[derive(Clone, Debug)]
pub struct ParticleSystem {
    positions: Vec<Vector3<f64>>,
    velocities: Vec<Vector3<f64>>,
    retired: Vec<bool>,
    params: SimParams,
    colliders: Vec<Collider>,
    config: SolverConfig,
    seed: u64,
    step_count: u64,
    // scratch
    prev: Vec<Vector3<f64>>,
    grid: SpatialHash,
    pairs: Vec<(u32, u32)>,
    pair_state: Vec<PairState>,
    contacts: Vec<(u32, u32)>,
}

impl ParticleSystem {
    /// Empty system.
    pub fn new(params: SimParams, config: SolverConfig, seed: u64) -> Result<Self, SimError> {
        params.validate()?;
        config.validate()?;
        let d = config.diameter(&params);
        Ok(ParticleSystem {
            positions: Vec::new(),
            velocities: Vec::new(),
            retired: Vec::new(),
            params,
            colliders: Vec::new(),
            grid: SpatialHash::new(d * config.cohesion_radius_multiplier),
            config,
            seed,
            step_count: 0,
            prev: Vec::new(),
            pairs: Vec::new(),
            pair_state: Vec::new(),
            contacts: Vec::new(),
        })
    }

    pub fn from_positions(
        positions: Vec<Vector3<f64>>,
        params: SimParams,
        config: SolverConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut s = Self::new(params, config, seed)?;
        s.add_particles(&positions);
        Ok(s)
    }

    /// A block of `count` particles at rest on a jittered lattice inside
    /// `region`, using the default solver configuration.
    pub fn spawn_block(region: &Aabb, count: usize, params: SimParams, seed: u64) -> Result<Self, SimError> {
        Self::spawn_block_with_config(region, count, params, SolverConfig::default(), seed)
    }

    pub fn spawn_block_with_config(
        region: &Aabb,
        count: usize,
        params: SimParams,
        config: SolverConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut s = Self::new(params, config, seed)?;
        let sites = lattice_sites(region, s.diameter(), count, seed)?;
        s.add_particles(&sites);
        Ok(s)
    }

    /// Appends particles at rest.
    pub fn add_particles(&mut self, positions: &[Vector3<f64>]) {
        self.positions.extend_from_slice(positions);
        self.velocities.resize(self.positions.len(), Vector3::zeros());
        self.retired.resize(self.positions.len(), false);
    }

    pub fn add_collider(&mut self, collider: Collider) -> ColliderId {
        self.colliders.push(collider);
        self.colliders.len() - 1
    }

    pub fn colliders(&self) -> &[Collider] {
        &self.colliders
    }

    pub fn collider_mut(&mut self, id: ColliderId) -> Option<&mut Collider> {
        self.colliders.get_mut(id)
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vector3<f64>] {
        &self.velocities
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Simulated particle diameter (world metres).
    pub fn diameter(&self) -> f64 {
        self.config.diameter(&self.params)
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter()
    }

    /// Simulated time in seconds.
    pub fn time(&self) -> f64 {
        self.step_count as f64 * self.config.dt
    }

    /// Removes a particle from the dynamics. It keeps its position (and so
    /// still counts towards region masses) but no longer moves or collides.
    pub fn retire(&mut self, i: usize) {
        self.retired[i] = true;
        self.velocities[i] = Vector3::zeros();
    }

    /// Retires every active particle whose position satisfies `pred`;
    /// returns how many were retired.
    pub fn retire_where(&mut self, pred: impl Fn(&Vector3<f64>) -> bool) -> usize {
        let mut n = 0;
        for i in 0..self.positions.len() {
            if !self.retired[i] && pred(&self.positions[i]) {
                self.retire(i);
                n += 1;
            }
        }
        n
    }

    pub fn is_retired(&self, i: usize) -> bool {
        self.retired[i]
    }

    pub fn active_count(&self) -> usize {
        self.retired.iter().filter(|r| !**r).count()
    }

    /// Opens or closes a funnel gate.
    pub fn set_gate(&mut self, id: ColliderId, open: bool) -> Result<(), SimError> {
        let c = self.colliders.get_mut(id).ok_or(SimError::NoSuchCollider(id))?;
        if !matches!(c.shape, Shape::Funnel { .. }) {
            return Err(SimError::WrongShape {
                id,
                expected: "funnel",
                found: c.shape.kind(),
            });
        }
        c.gate_open = open;
        Ok(())
    }

    /// Advances the system by one time step.
    pub fn step(&mut self) -> Result<(), SimError> {
        let cfg = &self.config;
        let dt = cfg.dt;
        let d = cfg.diameter(&self.params);
        let r = 0.5 * d;
        let n = self.positions.len();
        let damp = (1.0 - self.params.damping * dt / cfg.damping_reference).max(0.0);
        let g = Vector3::new(0.0, 0.0, -cfg.gravity * self.params.gravity_scale);
        let vmax = cfg.max_step_diameters * d / dt;
        let friction = self.params.friction;
        let iters = cfg.solver_iterations;
        let coh_k = (self.params.cohesion * COHESION_GAIN).min(1.0);
        let adh_k = (self.params.adhesion * self.params.particle_adhesion_scale * ADHESION_GAIN).min(1.0);
        let adh_range = self.params.adhesion_offset_scale / ADHESION_OFFSET_MAX * ADHESION_RANGE_AT_MAX * d;
        let reach = if coh_k > 0.0 {
            d * cfg.cohesion_radius_multiplier
        } else {
            d * cfg.cohesion_radius_multiplier.min(1.2)
        };

        // 1. damping, gravity, prediction
        self.prev.clear();
        self.prev.extend_from_slice(&self.positions);
        for i in 0..n {
            if self.retired[i] {
                continue;
            }
            let mut v = self.velocities[i] * damp + g * dt;
            let s = v.norm();
            if s > vmax {
                v *= vmax / s;
            }
            self.velocities[i] = v;
            self.positions[i] += v * dt;
        }

        // 2. neighbour search
        let retired = &self.retired;
        self.grid.rebuild(&self.positions, |i| !retired[i]);
        self.grid.pairs_within(&self.positions, reach, |i| !retired[i], &mut self.pairs);

        let margin = d + adh_range;
        self.contacts.clear();
        for i in 0..n {
            if self.retired[i] {
                continue;
            }
            let p = self.positions[i];
            for (c, col) in self.colliders.iter().enumerate() {
                if col.far_from(&p, margin + r) {
                    continue;
                }
                if col.sdf(&p).0 < r + margin {
                    self.contacts.push((i as u32, c as u32));
                }
            }
        }

        let d2 = d * d;
        let bond2 = (d * (1.0 + BOND_SLACK)).powi(2);
        let shock = if g.norm() > 0.0 { cfg.shock_propagation / d } else { 0.0 };
        let gdir = if shock > 0.0 { -g.normalize() } else { Vector3::zeros() };
        let xp = &self.prev;
        let contact2 = (d * (1.0 + CONTACT_MARGIN)).powi(2);
        let x = &mut self.positions;
        self.pair_state.clear();
        for &(i, j) in &self.pairs {
            let (iu, ju) = (i as usize, j as usize);
            let bonded = coh_k > 0.0 && (xp[iu] - xp[ju]).norm_squared() < bond2;
            if !bonded && (x[iu] - x[ju]).norm_squared() >= contact2 {
                continue;
            }
            let wi = if shock > 0.0 {
                let t = shock * (xp[iu] - xp[ju]).dot(&gdir);
                0.5 + 0.5 * t / (1.0 + t.abs())
            } else {
                0.5
            };
            self.pair_state.push(PairState { i, j, wi, bonded });
        }

        // 3. constraint projection
        let reach2 = reach * reach;
        for _ in 0..iters {
            for st in &self.pair_state {
                let (i, j) = (st.i as usize, st.j as usize);
                let (wi, wj) = (st.wi, 1.0 - st.wi);
                let delta = x[i] - x[j];
                let dist2 = delta.norm_squared();
                if dist2 < d2 {
                    let dist = dist2.sqrt();
                    let nrm = if dist > 1e-12 { delta / dist } else { Vector3::z() };
                    let pen = d - dist;
                    let corr = nrm * pen;
                    x[i] += corr * wi;
                    x[j] -= corr * wj;
                    if friction > 0.0 {
                        let rel = (x[i] - xp[i]) - (x[j] - xp[j]);
                        let tang = rel - nrm * rel.dot(&nrm);
                        let tl = tang.norm();
                        if tl > 1e-15 {
                            let fc = tang * (friction * pen / tl).min(1.0);
                            x[i] -= fc * wi;
                            x[j] += fc * wj;
                        }
                    }
                } else if st.bonded && dist2 < reach2 {
                    let dist = dist2.sqrt();
                    let c = delta * (coh_k * (dist - d) / dist);
                    x[i] -= c * wi;
                    x[j] += c * wj;
                }
            }
            for &(i, c) in &self.contacts {
                let (i, c) = (i as usize, c as usize);
                let col = &self.colliders[c];
                let (sd, nrm) = col.sdf(&x[i]);
                if sd < r {
                    let pen = r - sd;
                    x[i] += nrm * pen;
                    if friction > 0.0 {
                        let rel = (x[i] - xp[i]) - col.surface_displacement(&x[i]);
                        let tang = rel - nrm * rel.dot(&nrm);
                        let tl = tang.norm();
                        if tl > 1e-15 {
                            x[i] -= tang * (friction * pen / tl).min(1.0);
                        }
                    }
                } else if adh_k > 0.0 && sd < r + adh_range {
                    x[i] -= nrm * (adh_k * (sd - r).min(r + adh_range - sd));
                }
            }
        }

        // 4. velocity update
        let inv_dt = 1.0 / dt;
        let sleep = cfg.sleep_speed;
        let bound = cfg.world_bound;
        for i in 0..n {
            if self.retired[i] {
                continue;
            }
            let mut v = (x[i] - xp[i]) * inv_dt;
            let s = v.norm();
            if s > vmax {
                v *= vmax / s;
            }
            if sleep > 0.0 && s < sleep {
                x[i] = xp[i];
                v = Vector3::zeros();
            }
            self.velocities[i] = v;
            let p = x[i];
            if !(p.iter().all(|c| c.is_finite() && c.abs() <= bound) && v.iter().all(|c| c.is_finite())) {
                return Err(SimError::NumericalBlowup {
                    step: self.step_count,
                    particle: i,
                });
            }
        }
        for c in &mut self.colliders {
            c.end_step();
        }
        self.step_count += 1;
        Ok(())
    }

    /// Steps until the fastest particle is slower than `v_eps` or
    /// `max_steps` steps have run. At least one step is taken when
    /// `max_steps > 0`. Returns the number of steps used.
    pub fn settle(&mut self, v_eps: f64, max_steps: usize) -> Result<usize, SimError> {
        if !(v_eps >= 0.0) {
            return Err(SimError::InvalidConfig(format!("v_eps must be non-negative, got {v_eps}")));
        }
        let mut used = 0;
        while used < max_steps {
            self.step()?;
            used += 1;
            if self.max_speed() < v_eps {
                break;
            }
        }
        Ok(used)
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Total kinetic energy in joules of the simulated (scaled) system.
    pub fn kinetic_energy(&self) -> f64 {
        let m = self.params.particle_mass * 1e-9;
        self.velocities.iter().map(|v| 0.5 * m * v.norm_squared()).sum()
    }

    /// Mass in milligrams of particles whose centres lie inside `region`.
    pub fn mass_in_region(&self, region: &Aabb) -> f64 {
        let count = self.positions.iter().filter(|p| region.contains(p)).count();
        count as f64 * self.params.mass_mg()
    }

    /// Number of particle centres inside `region`.
    pub fn count_in_region(&self, region: &Aabb) -> usize {
        self.positions.iter().filter(|p| region.contains(p)).count()
    }

    /// Highest particle centre above the horizontal plane through
    /// `base_center`, among particles within `base_radius` horizontally.
    pub fn max_height_over_base(&self, base_center: &Vector3<f64>, base_radius: f64) -> f64 {
        max_height_over_base(&self.positions, base_center, base_radius, |_| true)
    }

    /// Largest pairwise overlap among active particles (metres).
    pub fn max_overlap(&self) -> f64 {
        let d = self.diameter();
        let mut grid = SpatialHash::new(d);
        grid.rebuild(&self.positions, |i| !self.retired[i]);
        let mut pairs = Vec::new();
        grid.pairs_within(&self.positions, d, |i| !self.retired[i], &mut pairs);
        pairs
            .iter()
            .map(|&(i, j)| d - (self.positions[i as usize] - self.positions[j as usize]).norm())
            .fold(0.0, f64::max)
    }

    /// Largest penetration of an active particle into any collider (metres).
    pub fn max_collider_penetration(&self) -> f64 {
        let r = self.radius();
        let mut worst: f64 = 0.0;
        for (i, p) in self.positions.iter().enumerate() {
            if self.retired[i] {
                continue;
            }
            for c in &self.colliders {
                worst = worst.max(r - c.sdf(p).0);
            }
        }
        worst
    }
}

/// Highest centre above the base plane among selected points within
/// `base_radius` of `base_center` horizontally; zero when none qualify.
pub fn max_height_over_base(
    positions: &[Vector3<f64>],
    base_center: &Vector3<f64>,
    base_radius: f64,
    select: impl Fn(usize) -> bool,
) -> f64 {
    let r2 = base_radius * base_radius;
    positions
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let dx = p.x - base_center.x;
            let dy = p.y - base_center.y;
            select(*i) && dx * dx + dy * dy <= r2
        })
        .map(|(_, p)| p.z - base_center.z)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Param, Pose};

    fn inert() -> SimParams {
        SimParams::midpoint()
            .with(Param::Cohesion, 0.0)
            .with(Param::Adhesion, 0.0)
            .with(Param::Friction, 0.0)
    }

    fn no_gravity() -> SolverConfig {
        SolverConfig {
            gravity: 0.0,
            ..SolverConfig::default()
        }
    }

    fn plane() -> Collider {
        Collider::new(Shape::Plane {}, Pose::identity()).unwrap()
    }

    #[test]
    fn spawn_single_particle_at_rest_inside_region() {
        let region = Aabb::new(Vector3::zeros(), Vector3::repeat(1.0));
        let s = ParticleSystem::spawn_block(&region, 1, SimParams::midpoint(), 3).unwrap();
        assert_eq!(s.len(), 1);
        assert!(region.contains(&s.positions()[0]));
        assert_eq!(s.velocities()[0], Vector3::zeros());
    }

    #[test]
    fn spawn_is_deterministic_and_non_overlapping() {
        let p = SimParams::midpoint();
        let d = SolverConfig::default().diameter(&p);
        let region = Aabb::new(Vector3::zeros(), Vector3::repeat(10.0 * d));
        let a = ParticleSystem::spawn_block(&region, 1000, p, 7).unwrap();
        let b = ParticleSystem::spawn_block(&region, 1000, p, 7).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert_eq!(a.len(), 1000);
        assert!(a.max_overlap() <= 1e-12);
        let loose = Aabb::new(Vector3::zeros(), Vector3::repeat(10.5 * d));
        let c = ParticleSystem::spawn_block(&loose, 1000, p, 7).unwrap();
        let e = ParticleSystem::spawn_block(&loose, 1000, p, 8).unwrap();
        assert_ne!(c.positions(), e.positions());
        assert!(c.max_overlap() <= 1e-12);
    }

    #[test]
    fn spawn_rejects_overfull_region() {
        let p = SimParams::midpoint();
        let d = SolverConfig::default().diameter(&p);
        let region = Aabb::new(Vector3::zeros(), Vector3::repeat(2.5 * d));
        // Independent count of sites: two per axis.
        let sites = (0..3).map(|_| ((2.5 * d) / d).floor() as usize).product::<usize>();
        assert_eq!(sites, 8);
        match ParticleSystem::spawn_block(&region, 27, p, 1) {
            Err(SimError::RegionTooSmall { requested, capacity }) => {
                assert_eq!((requested, capacity), (27, 8));
            }
            other => panic!("expected RegionTooSmall, got {other:?}"),
        }
        assert!(ParticleSystem::spawn_block(&region, 8, p, 1).is_ok());
    }

    #[test]
    fn free_fall_comes_to_rest_on_plane() {
        let p = inert().with(Param::Damping, 1.0);
        let cfg = SolverConfig::default();
        let d = cfg.diameter(&p);
        let mut s = ParticleSystem::from_positions(vec![Vector3::new(0.0, 0.0, 5.0 * d)], p, cfg, 0).unwrap();
        s.add_collider(plane());
        let used = s.settle(1e-3, 5000).unwrap();
        assert!(used < 5000);
        let z = s.positions()[0].z;
        assert!(z > 0.0 && (0.5 * d - z) <= 0.05 * d, "z = {z}, d = {d}");
        assert!(s.max_collider_penetration() <= 0.05 * s.radius());
    }

    #[test]
    fn exact_touch_is_left_alone() {
        let p = inert();
        let cfg = no_gravity();
        let d = cfg.diameter(&p);
        let start = vec![Vector3::new(0.0, 0.2, 0.3), Vector3::new(d, 0.2, 0.3)];
        assert_eq!((start[1] - start[0]).norm_squared(), d * d);
        let mut s = ParticleSystem::from_positions(start.clone(), p, cfg, 0).unwrap();
        s.step().unwrap();
        assert_eq!(s.positions(), &start[..]);
    }

    #[test]
    fn overlap_is_split_symmetrically() {
        let p = inert().with(Param::Damping, 0.0);
        let cfg = no_gravity();
        let d = cfg.diameter(&p);
        let a = Vector3::new(0.01, -0.02, 0.03);
        let b = a + Vector3::new(0.3, 0.5, -0.2).normalize() * (0.7 * d);
        let mid = 0.5 * (a + b);
        let mut s = ParticleSystem::from_positions(vec![a, b], p, cfg, 0).unwrap();
        s.step().unwrap();
        let (na, nb) = (s.positions()[0], s.positions()[1]);
        assert!((na - nb).norm() > 0.7 * d);
        assert!(((na - mid) + (nb - mid)).norm() <= 1e-9);
        assert!(((na - a).norm() - (nb - b).norm()).abs() <= 1e-9);
    }

    #[test]
    fn dropped_block_settles() {
        let p = SimParams::midpoint().with(Param::Damping, 0.5);
        let cfg = SolverConfig::default();
        let d = cfg.diameter(&p);
        let region = Aabb::new(Vector3::new(-4.0 * d, -4.0 * d, 2.0 * d), Vector3::new(4.0 * d, 4.0 * d, 12.0 * d));
        let mut s = ParticleSystem::spawn_block_with_config(&region, 500, p, cfg, 11).unwrap();
        s.add_collider(plane());
        let used = s.settle(0.005, 20_000).unwrap();
        assert!(used < 20_000);
        assert!(s.max_speed() < 0.005);
        assert!(s.max_overlap() <= 0.05 * d);
    }

    #[test]
    fn zero_threshold_runs_to_the_limit() {
        let p = SimParams::midpoint();
        let mut s = ParticleSystem::from_positions(vec![Vector3::zeros()], p, SolverConfig::default(), 0).unwrap();
        s.add_collider(plane());
        assert_eq!(s.settle(0.0, 37).unwrap(), 37);
        assert_eq!(s.step_count(), 37);
        assert!(s.settle(-1.0, 5).is_err());
    }

    fn loaded_funnel(count: usize) -> (ParticleSystem, ColliderId, f64) {
        let p = inert();
        let cfg = SolverConfig::default();
        let d = cfg.diameter(&p);
        let tip_z = 0.5;
        let funnel = Collider::new(
            Shape::Funnel {
                exit_radius: 0.035,
                top_radius: 0.1,
                cone_height: 0.08,
                collar_height: 0.2,
                wall_thickness: 0.006,
            },
            Pose::from_translation(Vector3::new(0.0, 0.0, tip_z)),
        )
        .unwrap();
        let half = (0.1 - 0.003 - 0.5 * d) / std::f64::consts::SQRT_2;
        let region = Aabb::new(
            Vector3::new(-half, -half, tip_z + 0.08),
            Vector3::new(half, half, tip_z + 0.28),
        );
        let mut s = ParticleSystem::spawn_block_with_config(&region, count, p, cfg, 5).unwrap();
        let id = s.add_collider(funnel);
        (s, id, tip_z)
    }

    #[test]
    fn closed_gate_holds_and_open_gate_drains() {
        let (mut s, id, tip_z) = loaded_funnel(200);
        s.settle(0.005, 600).unwrap();
        assert_eq!(s.positions().iter().filter(|p| p.z < tip_z).count(), 0);
        assert!(s.max_collider_penetration() <= 0.05 * s.radius());

        s.set_gate(id, true).unwrap();
        s.settle(0.005, 600).unwrap();
        let below = s.positions().iter().filter(|p| p.z < tip_z).count();
        assert!(below as f64 >= 0.95 * 200.0, "{below} of 200 below the gate");
    }

    #[test]
    fn gate_on_non_funnel_is_rejected() {
        let mut s = ParticleSystem::new(SimParams::midpoint(), SolverConfig::default(), 0).unwrap();
        let id = s.add_collider(plane());
        assert!(matches!(s.set_gate(id, true), Err(SimError::WrongShape { .. })));
        assert!(matches!(s.set_gate(9, true), Err(SimError::NoSuchCollider(9))));
    }

    #[test]
    fn mass_in_region_counts_centres() {
        let p = SimParams::midpoint().with(Param::ParticleMass, 15.0);
        let d = SolverConfig::default().diameter(&p);
        let region = Aabb::new(Vector3::zeros(), Vector3::repeat(10.0 * d));
        let mut s = ParticleSystem::spawn_block(&region, 1000, p, 2).unwrap();
        assert!((s.mass_in_region(&region) - 15.0).abs() < 1e-9);
        let n = s.retire_where(|q| q.x < 5.0 * d);
        assert_eq!(n, 500);
        assert_eq!(s.len(), 1000);
        assert_eq!(s.active_count(), 500);
        // retired particles keep their mass where they froze
        assert!((s.mass_in_region(&region) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn retired_particles_do_not_move() {
        let p = SimParams::midpoint();
        let mut s = ParticleSystem::from_positions(
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)],
            p,
            SolverConfig::default(),
            0,
        )
        .unwrap();
        s.retire(0);
        for _ in 0..10 {
            s.step().unwrap();
        }
        assert_eq!(s.positions()[0], Vector3::new(0.0, 0.0, 1.0));
        assert!(s.positions()[1].z < 1.0);
    }

    #[test]
    fn blowup_is_reported() {
        let cfg = SolverConfig {
            world_bound: 0.5,
            ..SolverConfig::default()
        };
        let mut s = ParticleSystem::from_positions(vec![Vector3::new(0.0, 0.0, 0.49)], SimParams::midpoint(), cfg, 0)
            .unwrap();
        let mut err = None;
        for _ in 0..2000 {
            if let Err(e) = s.step() {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(SimError::NumericalBlowup { particle: 0, .. })));
    }

    #[test]
    fn height_over_base_examples() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.03),
            Vector3::new(0.04, 0.0, 0.05),
            Vector3::new(0.2, 0.0, 0.5),
        ];
        let base = Vector3::new(0.0, 0.0, 0.01);
        assert!((max_height_over_base(&pts, &base, 0.05, |_| true) - 0.04).abs() < 1e-15);
        assert!((max_height_over_base(&pts, &base, 0.01, |_| true) - 0.02).abs() < 1e-15);
        assert_eq!(max_height_over_base(&pts, &base, 0.05, |_| false), 0.0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let p = SimParams::midpoint();
            let d = SolverConfig::default().diameter(&p);
            let region = Aabb::new(Vector3::new(-3.0 * d, -3.0 * d, d), Vector3::new(3.0 * d, 3.0 * d, 9.0 * d));
            let mut s = ParticleSystem::spawn_block(&region, 200, p, 4).unwrap();
            s.add_collider(plane());
            for _ in 0..200 {
                s.step().unwrap();
            }
            s.positions().to_vec()
        };
        assert_eq!(run(), run());
    }
}
