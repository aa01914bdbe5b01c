//! Powder weighing with a pitching, shaking spoon.
//!
//! The spoon is an open tray whose front lip sits above a box-shaped
//! container on a virtual balance. Each action pitches the tray about its lip
//! towards a target angle, jerks it backward along its own axis and back, and
//! waits for the powder to settle. Particles that drop below the container
//! rim are frozen where they are: inside the container they add to the
//! balance reading, outside it they are stray.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    lattice_capacity, lattice_sites, Aabb, Collider, ColliderId, ParticleSystem, Pose, Shape, SimError, SimParams,
    SolverConfig,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("spoon holds {capacity} particles, {requested} requested")]
    InfeasibleLoad { requested: usize, capacity: usize },
    #[error("episode finished; call reset first")]
    EpisodeFinished,
    #[error("episode still running")]
    EpisodeActive,
    #[error("no episode; call reset first")]
    NotReset,
    #[error("action component {0} is not finite")]
    InvalidAction(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Reward for a balance reading: `-|w_target - w_current|`, plus one when
/// that is above -1 mg.
pub fn reward_fn(w_target: f64, w_current: f64) -> f64 {
    let delta = -(w_target - w_current).abs();
    if delta > -1.0 {
        delta + 1.0
    } else {
        delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Balance reading, mg.
    pub w_current: f64,
    /// mg.
    pub w_target: f64,
    /// Spoon pitch, degrees.
    pub theta_spoon: f64,
}

impl Observation {
    /// The triple fed to agents.
    pub fn normalized(&self, w_scale: f64, theta_max: f64) -> [f64; 3] {
        [
            self.w_current / w_scale,
            self.w_target / w_scale,
            self.theta_spoon / theta_max,
        ]
    }
}

/// Normalized action; both components are clamped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub a_shake: f64,
    pub a_incline: f64,
}

impl Action {
    pub fn new(a_shake: f64, a_incline: f64) -> Self {
        Action { a_shake, a_incline }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Action::new(a[0], a[1])
    }

    fn checked(&self) -> Result<(f64, f64), EnvError> {
        for v in [self.a_shake, self.a_incline] {
            if !v.is_finite() {
                return Err(EnvError::InvalidAction(v));
            }
        }
        Ok((self.a_shake.clamp(-1.0, 1.0), self.a_incline.clamp(-1.0, 1.0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// mg added to the container by this step.
    pub dispensed_delta: f64,
    pub settle_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of an episode trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: usize,
    pub action: Action,
    pub w_current: f64,
    pub theta_spoon: f64,
    pub reward: f64,
    pub done: bool,
}

/// Per-episode settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub params: SimParams,
    /// mg.
    pub w_target: f64,
    pub t_max: usize,
    pub spoon_load_count: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.params.validate()?;
        if !(self.w_target > 0.0 && self.w_target.is_finite()) {
            return Err(EnvError::InvalidConfig(format!("w_target must be positive, got {}", self.w_target)));
        }
        if self.t_max < 1 {
            return Err(EnvError::InvalidConfig("t_max must be at least 1".into()));
        }
        let load = self.spoon_load_count as f64 * self.params.mass_mg();
        if !(load > self.w_target) {
            return Err(EnvError::InvalidConfig(format!(
                "spoon load of {load} mg cannot reach the {} mg target",
                self.w_target
            )));
        }
        Ok(())
    }
}

/// Scene geometry and motion profile. Lengths are world metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSettings {
    /// Largest shake displacement.
    pub a_max: f64,
    /// Largest pitch, degrees.
    pub theta_max: f64,
    /// Pitch rate, degrees per second.
    pub omega: f64,
    /// Seconds for the backward jerk and return.
    pub shake_duration: f64,
    /// Share of the shake spent on the backward stroke.
    pub stroke_fraction: f64,
    /// Longest wait after the shake, seconds.
    pub settle_window: f64,
    /// Balance normalization, mg.
    pub w_scale: f64,
    pub spoon_length: f64,
    pub spoon_width: f64,
    pub spoon_height: f64,
    /// Height of the front wall the powder leaves over.
    pub lip_height: f64,
    pub wall_thickness: f64,
    pub container_length: f64,
    pub container_width: f64,
    pub container_height: f64,
    /// Horizontal offset of the container centre ahead of the spoon lip.
    pub container_offset: f64,
    /// Vertical gap from the container rim to the underside of the spoon.
    pub drop_gap: f64,
    /// Speed below which the settle window ends early (m/s).
    pub v_eps: f64,
    pub reset_settle_steps: usize,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            a_max: 0.02,
            theta_max: 60.0,
            omega: 90.0,
            shake_duration: 0.5,
            stroke_fraction: 0.1,
            settle_window: 0.5,
            w_scale: 30.0,
            spoon_length: 0.4,
            spoon_width: 0.3,
            spoon_height: 0.08,
            lip_height: 0.04,
            wall_thickness: 0.006,
            container_length: 0.5,
            container_width: 0.4,
            container_height: 0.1,
            container_offset: 0.1,
            drop_gap: 0.08,
            v_eps: 0.005,
            reset_settle_steps: 240,
        }
    }
}

impl EnvSettings {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("a_max", self.a_max),
            ("theta_max", self.theta_max),
            ("omega", self.omega),
            ("shake_duration", self.shake_duration),
            ("settle_window", self.settle_window),
            ("w_scale", self.w_scale),
            ("spoon_length", self.spoon_length),
            ("spoon_width", self.spoon_width),
            ("spoon_height", self.spoon_height),
            ("lip_height", self.lip_height),
            ("wall_thickness", self.wall_thickness),
            ("container_length", self.container_length),
            ("container_width", self.container_width),
            ("container_height", self.container_height),
            ("drop_gap", self.drop_gap),
            ("v_eps", self.v_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.stroke_fraction > 0.0 && self.stroke_fraction <= 1.0) {
            return Err(EnvError::InvalidConfig("stroke_fraction must lie in (0, 1]".into()));
        }
        if self.lip_height > self.spoon_height {
            return Err(EnvError::InvalidConfig("lip_height above spoon_height".into()));
        }
        if self.theta_max > 90.0 {
            return Err(EnvError::InvalidConfig("theta_max above 90 degrees".into()));
        }
        Ok(())
    }

    /// Particles the spoon can hold at diameter `d`.
    pub fn spoon_capacity(&self, d: f64) -> usize {
        lattice_capacity(self.spoon_length, d)
            * lattice_capacity(self.spoon_width, d)
            * lattice_capacity(self.spoon_height, d)
    }

    fn spoon_floor_z(&self) -> f64 {
        self.container_height + self.drop_gap + self.wall_thickness
    }

    /// Pitch pivot in the spoon frame: the top of the front wall.
    fn pivot_local(&self) -> Vector3<f64> {
        Vector3::new(0.5 * self.spoon_length + self.wall_thickness, 0.0, self.lip_height)
    }

    /// The pivot in the world; the lip sits above `x = 0`.
    fn pivot_world(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.spoon_floor_z() + self.lip_height)
    }

    /// Spoon pose at `pitch` degrees, pulled back along its axis by `shift`.
    pub fn spoon_pose(&self, pitch: f64, shift: f64) -> Pose {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch.to_radians());
        let axis = rot * Vector3::x();
        let position = self.pivot_world() - rot * self.pivot_local() - shift * axis;
        Pose::new(position, rot)
    }

    /// Interior of the container up to its rim.
    pub fn container_region(&self) -> Aabb {
        let c = Vector3::new(self.container_offset, 0.0, 0.5 * self.container_height);
        Aabb::from_center_half_extents(
            c,
            Vector3::new(0.5 * self.container_length, 0.5 * self.container_width, 0.5 * self.container_height),
        )
    }

    /// Column above the spoon interior tall enough to hold `count` particles
    /// on the loose spawn lattice.
    fn drop_region(&self, d: f64, count: usize) -> Aabb {
        let p = self.spoon_pose(0.0, 0.0).position;
        let spacing = SPAWN_SPACING * d;
        let per_layer = lattice_capacity(self.spoon_length, spacing) * lattice_capacity(self.spoon_width, spacing);
        let layers = count.div_ceil(per_layer.max(1));
        Aabb::new(
            p + Vector3::new(-0.5 * self.spoon_length, -0.5 * self.spoon_width, 0.0),
            p + Vector3::new(0.5 * self.spoon_length, 0.5 * self.spoon_width, (layers as f64 + 0.5) * spacing),
        )
    }
}

/// Spawn lattice pitch in diameters. The loose lattice rains into the spoon
/// and settles into a random packing instead of an aligned crystal.
const SPAWN_SPACING: f64 = 1.4;

const QUIET_STEPS: usize = 5;

/// Where the loaded particles are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MassBalance {
    /// Still moving: on the spoon or falling.
    pub spoon: usize,
    pub container: usize,
    pub stray: usize,
    /// Particles that fell off while the spoon was being loaded.
    pub load_loss: usize,
}

struct Episode {
    cfg: EpisodeConfig,
    sys: ParticleSystem,
    spoon: ColliderId,
    theta: f64,
    t: usize,
    done: bool,
    in_container: usize,
    stray: usize,
    load_loss: usize,
}

pub struct WeighingEnv {
    settings: EnvSettings,
    solver: SolverConfig,
    episode: Option<Episode>,
}

impl WeighingEnv {
    pub fn new(settings: EnvSettings, solver: SolverConfig) -> Result<Self, EnvError> {
        settings.validate()?;
        solver.validate()?;
        Ok(WeighingEnv {
            settings,
            solver,
            episode: None,
        })
    }

    pub fn settings(&self) -> &EnvSettings {
        &self.settings
    }

    /// Loads and settles a fresh spoon.
    pub fn reset(&mut self, cfg: EpisodeConfig) -> Result<Observation, EnvError> {
        cfg.validate()?;
        let s = &self.settings;
        let d = self.solver.diameter(&cfg.params);
        let capacity = s.spoon_capacity(d);
        if cfg.spoon_load_count > capacity {
            return Err(EnvError::InfeasibleLoad {
                requested: cfg.spoon_load_count,
                capacity,
            });
        }
        self.episode = None;

        let mut sys = ParticleSystem::new(cfg.params, self.solver.clone(), cfg.seed)?;
        let spoon = sys.add_collider(Collider::new(
            Shape::Scoop {
                length: s.spoon_length,
                width: s.spoon_width,
                height: s.spoon_height,
                lip_height: s.lip_height,
                wall_thickness: s.wall_thickness,
            },
            s.spoon_pose(0.0, 0.0),
        )?);
        sys.add_collider(Collider::new(
            Shape::OpenBox {
                length: s.container_length,
                width: s.container_width,
                height: s.container_height,
                wall_thickness: s.wall_thickness,
            },
            Pose::from_translation(Vector3::new(s.container_offset, 0.0, 0.0)),
        )?);
        let sites = lattice_sites(&s.drop_region(d, cfg.spoon_load_count), SPAWN_SPACING * d, cfg.spoon_load_count, cfg.seed)?;
        sys.add_particles(&sites);

        let mut ep = Episode {
            cfg,
            sys,
            spoon,
            theta: 0.0,
            t: 0,
            done: false,
            in_container: 0,
            stray: 0,
            load_loss: 0,
        };
        settle(&mut ep, s, s.reset_settle_steps)?;
        // powder that spilled while loading was never on the spoon
        ep.load_loss = ep.in_container + ep.stray;
        ep.in_container = 0;
        ep.stray = 0;
        let obs = observation(&ep);
        self.episode = Some(ep);
        Ok(obs)
    }

    pub fn apply_action(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        let (a_shake, a_incline) = action.checked()?;
        let s = &self.settings;
        let ep = self.episode.as_mut().ok_or(EnvError::NotReset)?;
        if ep.done {
            return Err(EnvError::EpisodeFinished);
        }
        let dt = self.solver.dt;
        let before = ep.in_container;

        let target = 0.5 * (a_incline + 1.0) * s.theta_max;
        let amplitude = 0.5 * (a_shake + 1.0) * s.a_max;

        let rate = s.omega * dt;
        while (target - ep.theta).abs() > 1e-12 {
            let step = (target - ep.theta).clamp(-rate, rate);
            ep.theta += step;
            set_spoon(ep, s, 0.0);
            advance(ep, s)?;
        }

        // a quick backward stroke followed by a slow return
        let shake_steps = (s.shake_duration / dt).round().max(1.0) as usize;
        let stroke = ((s.stroke_fraction * shake_steps as f64).round() as usize).clamp(1, shake_steps);
        for k in 1..=shake_steps {
            if amplitude > 0.0 {
                let shift = if k <= stroke {
                    amplitude * k as f64 / stroke as f64
                } else {
                    amplitude * (shake_steps - k) as f64 / (shake_steps - stroke).max(1) as f64
                };
                set_spoon(ep, s, shift);
            }
            advance(ep, s)?;
        }

        let settle_steps = settle(ep, s, (s.settle_window / dt).round() as usize)?;

        ep.t += 1;
        let obs = observation(ep);
        let reward = reward_fn(obs.w_target, obs.w_current);
        ep.done = obs.w_current >= obs.w_target || ep.t >= ep.cfg.t_max;
        Ok(StepOutcome {
            observation: obs,
            reward,
            done: ep.done,
            info: StepInfo {
                dispensed_delta: (ep.in_container - before) as f64 * ep.cfg.params.mass_mg(),
                settle_steps,
            },
        })
    }

    /// `|w_target - w_current|` of a finished episode.
    pub fn episode_error(&self) -> Result<f64, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        if !ep.done {
            return Err(EnvError::EpisodeActive);
        }
        let o = observation(ep);
        Ok((o.w_target - o.w_current).abs())
    }

    pub fn observation(&self) -> Option<Observation> {
        self.episode.as_ref().map(|ep| observation(ep))
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_some_and(|ep| ep.done)
    }

    pub fn step_index(&self) -> usize {
        self.episode.as_ref().map_or(0, |ep| ep.t)
    }

    pub fn mass_balance(&self) -> Option<MassBalance> {
        self.episode.as_ref().map(|ep| MassBalance {
            spoon: ep.sys.active_count(),
            container: ep.in_container,
            stray: ep.stray,
            load_loss: ep.load_loss,
        })
    }

    /// The underlying particle system of the running episode.
    pub fn system(&self) -> Option<&ParticleSystem> {
        self.episode.as_ref().map(|ep| &ep.sys)
    }
}

fn set_spoon(ep: &mut Episode, s: &EnvSettings, shift: f64) {
    let pose = s.spoon_pose(ep.theta, shift);
    ep.sys
        .collider_mut(ep.spoon)
        .expect("spoon collider exists")
        .set_pose(pose);
}

/// Steps until the powder has been still for a few consecutive steps, at
/// most `max_steps`. Returns the steps taken.
fn settle(ep: &mut Episode, s: &EnvSettings, max_steps: usize) -> Result<usize, EnvError> {
    let mut quiet = 0;
    let mut used = 0;
    while used < max_steps && quiet < QUIET_STEPS {
        advance(ep, s)?;
        used += 1;
        quiet = if ep.sys.max_speed() < s.v_eps { quiet + 1 } else { 0 };
    }
    Ok(used)
}

/// One simulation step followed by freezing everything below the rim.
fn advance(ep: &mut Episode, s: &EnvSettings) -> Result<(), EnvError> {
    ep.sys.step()?;
    let c = s.container_region();
    let rim = c.max.z;
    let inside = |p: &Vector3<f64>| p.x > c.min.x && p.x < c.max.x && p.y > c.min.y && p.y < c.max.y;
    ep.in_container += ep.sys.retire_where(|p| p.z < rim && inside(p));
    ep.stray += ep.sys.retire_where(|p| p.z < rim && !inside(p));
    Ok(())
}

fn observation(ep: &Episode) -> Observation {
    Observation {
        w_current: ep.in_container as f64 * ep.cfg.params.mass_mg(),
        w_target: ep.cfg.w_target,
        theta_spoon: ep.theta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Param;

    fn free_flowing() -> SimParams {
        SimParams::midpoint()
            .with(Param::Friction, 0.1)
            .with(Param::Cohesion, 0.0)
            .with(Param::Adhesion, 0.0)
            .with(Param::ParticleMass, 15.0)
    }

    fn small(seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            params: free_flowing(),
            w_target: 1.5,
            t_max: 5,
            spoon_load_count: 300,
            seed,
        }
    }

    /// A spoon that 300 particles cover about one and a half layers deep.
    fn small_spoon() -> EnvSettings {
        EnvSettings {
            spoon_length: 0.2,
            spoon_width: 0.15,
            spoon_height: 0.05,
            lip_height: 0.025,
            ..Default::default()
        }
    }

    fn env() -> WeighingEnv {
        WeighingEnv::new(small_spoon(), SolverConfig::default()).unwrap()
    }

    #[test]
    fn reward_table() {
        assert_eq!(reward_fn(15.0, 15.0), 1.0);
        assert_eq!(reward_fn(15.0, 14.5), 0.5);
        assert_eq!(reward_fn(15.0, 10.0), -5.0);
        assert_eq!(reward_fn(15.0, 14.0), -1.0);
        assert_eq!(reward_fn(15.0, 17.0), -2.0);
    }

    #[test]
    fn reward_matches_brute_force_grid() {
        for i in 0..=300 {
            for j in 0..=300 {
                let (wt, wc) = (i as f64 * 0.1, j as f64 * 0.1);
                let err = (wt - wc).abs();
                let want = if err < 1.0 { 1.0 - err } else { -err };
                assert_eq!(reward_fn(wt, wc), want, "{wt} {wc}");
            }
        }
    }

    #[test]
    fn reset_starts_empty_and_level() {
        let mut e = env();
        let o = e.reset(small(1)).unwrap();
        assert_eq!(o.w_current, 0.0);
        assert_eq!(o.theta_spoon, 0.0);
        assert_eq!(
            e.mass_balance().unwrap(),
            MassBalance {
                spoon: 300,
                container: 0,
                stray: 0,
                load_loss: 0,
            }
        );
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset(small(7)).unwrap(), b.reset(small(7)).unwrap());
        assert_eq!(a.system().unwrap().positions(), b.system().unwrap().positions());
    }

    #[test]
    fn overfull_spoon_is_infeasible() {
        let s = small_spoon();
        let d = SolverConfig::default().diameter(&free_flowing());
        let cap = s.spoon_capacity(d);
        let cfg = EpisodeConfig {
            spoon_load_count: cap + 1,
            w_target: 1.0,
            ..small(0)
        };
        match env().reset(cfg) {
            Err(EnvError::InfeasibleLoad { requested, capacity }) => {
                assert_eq!((requested, capacity), (cap + 1, cap));
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unreachable_target_is_rejected() {
        let cfg = EpisodeConfig {
            w_target: 300.0 * 0.015,
            ..small(0)
        };
        assert!(matches!(env().reset(cfg), Err(EnvError::InvalidConfig(_))));
    }

    #[test]
    fn null_action_moves_nothing() {
        let mut e = env();
        e.reset(small(2)).unwrap();
        for _ in 0..3 {
            let out = e.apply_action(Action::new(-1.0, -1.0)).unwrap();
            assert_eq!(out.info.dispensed_delta, 0.0);
            assert_eq!(out.observation.w_current, 0.0);
            assert_eq!(out.reward, -1.5);
        }
        assert_eq!(e.mass_balance().unwrap().stray, 0);
    }

    #[test]
    fn full_tilt_dispenses_and_conserves_mass() {
        let mut e = env();
        e.reset(EpisodeConfig {
            w_target: 4.0,
            ..small(3)
        })
        .unwrap();
        let out = e.apply_action(Action::new(1.7, 1.7)).unwrap();
        assert!(out.info.dispensed_delta > 0.0, "{out:?}");
        assert_eq!(out.observation.theta_spoon, 60.0);
        let m = e.mass_balance().unwrap();
        assert_eq!(m.spoon + m.container + m.stray + m.load_loss, 300);
        assert_eq!(m.load_loss, 0);
        assert_eq!(m.container as f64 * 0.015, out.observation.w_current);
    }

    #[test]
    fn finished_episode_refuses_actions() {
        let mut e = env();
        e.reset(EpisodeConfig { t_max: 1, ..small(4) }).unwrap();
        assert!(matches!(e.episode_error(), Err(EnvError::EpisodeActive)));
        let out = e.apply_action(Action::new(-1.0, -1.0)).unwrap();
        assert!(out.done);
        assert!(matches!(e.apply_action(Action::new(0.0, 0.0)), Err(EnvError::EpisodeFinished)));
        assert_eq!(e.episode_error().unwrap(), 1.5);
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let mut e = env();
        e.reset(small(5)).unwrap();
        assert!(matches!(
            e.apply_action(Action::new(f64::NAN, 0.0)),
            Err(EnvError::InvalidAction(_))
        ));
    }

    #[test]
    fn spoon_pivots_about_its_lip() {
        let s = EnvSettings::default();
        for pitch in [0.0, 25.0, 60.0] {
            let pose = s.spoon_pose(pitch, 0.0);
            let lip = pose.to_world(&s.pivot_local());
            assert!((lip - s.pivot_world()).norm() < 1e-12);
        }
        // a positive pitch lowers the front of the floor
        let pose = s.spoon_pose(30.0, 0.0);
        let front = pose.to_world(&Vector3::new(0.5 * s.spoon_length, 0.0, 0.0));
        let back = pose.to_world(&Vector3::new(-0.5 * s.spoon_length, 0.0, 0.0));
        assert!(front.z < back.z);
    }
}
