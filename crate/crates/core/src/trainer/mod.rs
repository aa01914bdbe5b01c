//! Flowability-ordered curriculum training and its baselines.
//!
//! Levels are calibrated parameter sets sorted by angle of repose, most
//! flowable first. The curriculum moves to the next level once the last
//! `k_queue` episode errors are good enough, or after `m_level` episodes.

mod eval;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, EvalReport, EvalRow, EvalSpec, MaterialSets, Policy, REPORT_SCHEMA_VERSION};

use crate::calibrate::AcceptedSets;
use crate::env::{Action, EnvError, EpisodeConfig, Observation, StepOutcome, WeighingEnv};
use crate::rng::{child_seed, derive_seed};
use crate::sac::{PolicyState, ReplayBuffer, SacError, Transition};
use crate::sim::{Param, SimParams, N_PARAMS};

pub const LEVELS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid curriculum config: {0}")]
    InvalidConfig(String),
    #[error("no material falls inside the flowability range")]
    EmptyLevels,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] SacError),
    #[error("{0}")]
    Hook(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowabilityLevel {
    pub target_aor: f64,
    pub param_sets: Vec<SimParams>,
    pub material_label: String,
}

/// Levels sorted by ascending angle of repose; index 0 flows best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSet {
    pub schema_version: u32,
    pub levels: Vec<FlowabilityLevel>,
    pub flow_range: [f64; 2],
}

impl LevelSet {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Sorts materials by target angle, drops those outside `flow_range` and
/// keeps at most `per_level` parameter sets each.
pub fn build_levels(sets: &[AcceptedSets], flow_range: [f64; 2], per_level: usize) -> Result<LevelSet, TrainError> {
    if per_level == 0 {
        return Err(TrainError::InvalidConfig("per_level must be at least 1".into()));
    }
    let mut levels: Vec<FlowabilityLevel> = sets
        .iter()
        .filter(|s| !s.param_sets.is_empty())
        .filter(|s| s.target_aor >= flow_range[0] && s.target_aor <= flow_range[1])
        .map(|s| FlowabilityLevel {
            target_aor: s.target_aor,
            param_sets: s.param_sets.iter().take(per_level).copied().collect(),
            material_label: s.material.clone(),
        })
        .collect();
    if levels.is_empty() {
        return Err(TrainError::EmptyLevels);
    }
    levels.sort_by(|a, b| a.target_aor.total_cmp(&b.target_aor));
    Ok(LevelSet { schema_version: LEVELS_SCHEMA_VERSION, levels, flow_range })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Curriculum,
    ReverseCurriculum,
    Random,
    DomainRandomization,
}

impl Ordering {
    pub fn label(self) -> &'static str {
        match self {
            Ordering::Curriculum => "curriculum",
            Ordering::ReverseCurriculum => "reverse_curriculum",
            Ordering::Random => "random",
            Ordering::DomainRandomization => "domain_randomization",
        }
    }

    /// Whether the level scheduler runs.
    pub fn is_curricular(self) -> bool {
        matches!(self, Ordering::Curriculum | Ordering::ReverseCurriculum)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub ordering: Ordering,
    pub n_max: usize,
    pub t_max: usize,
    pub k_queue: usize,
    /// mg.
    pub t_mean: f64,
    /// mg.
    pub t_max_err: f64,
    pub m_level: usize,
    /// mg.
    pub w_target_train: f64,
    pub spoon_load_count: usize,
    pub per_level: usize,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            ordering: Ordering::Curriculum,
            n_max: 4000,
            t_max: 30,
            k_queue: 20,
            t_mean: 0.8,
            t_max_err: 1.0,
            m_level: 1330,
            w_target_train: 15.0,
            spoon_load_count: 3000,
            per_level: 7,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.k_queue < 1 {
            return bad("k_queue must be at least 1");
        }
        if self.m_level < self.k_queue {
            return bad("m_level must be at least k_queue");
        }
        if self.n_max < 1 {
            return bad("n_max must be at least 1");
        }
        if self.t_max < 1 {
            return bad("t_max must be at least 1");
        }
        if self.per_level < 1 {
            return bad("per_level must be at least 1");
        }
        if !(self.w_target_train > 0.0 && self.w_target_train.is_finite()) {
            return bad("w_target_train must be positive");
        }
        if !(self.t_mean.is_finite() && self.t_max_err.is_finite()) {
            return bad("error thresholds must be finite");
        }
        Ok(())
    }
}

/// Level scheduler state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurriculumState {
    pub level: usize,
    pub error_queue: VecDeque<f64>,
    /// Episodes spent on the current level.
    pub m: usize,
    /// Episodes completed.
    pub episode: usize,
}

impl CurriculumState {
    /// Records one episode error, dropping the oldest beyond `k`.
    pub fn push_error(&mut self, e: f64, k: usize) {
        if self.error_queue.len() == k {
            self.error_queue.pop_front();
        }
        self.error_queue.push_back(e);
        self.m += 1;
        self.episode += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Advance,
    Stay,
}

/// Advances when a full queue has mean below `t_mean` or max below
/// `t_max_err`, or once `m_level` episodes were spent on the level.
pub fn advance_check(state: &CurriculumState, config: &CurriculumConfig) -> Advance {
    let q = &state.error_queue;
    let threshold = q.len() == config.k_queue && {
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mean < config.t_mean || max < config.t_max_err
    };
    if threshold || state.m >= config.m_level {
        Advance::Advance
    } else {
        Advance::Stay
    }
}

/// Applies an advance: next level capped at `n_levels - 1`, queue and
/// level counter cleared.
pub fn apply_advance(state: &mut CurriculumState, n_levels: usize) {
    state.level = (state.level + 1).min(n_levels.saturating_sub(1));
    state.error_queue.clear();
    state.m = 0;
}

/// Which parameter set an episode ran with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampled {
    pub params: SimParams,
    /// `(level, set)` in ascending-angle level order; `None` for domain
    /// randomization.
    pub source: Option<(usize, usize)>,
}

impl Sampled {
    pub fn theta_id(&self) -> String {
        match self.source {
            Some((l, k)) => format!("{l}.{k}"),
            None => "dr".to_string(),
        }
    }
}

/// Draws the episode's parameters for the scheduler state.
pub fn sample_config(levels: &LevelSet, state: &CurriculumState, ordering: Ordering, rng: &mut impl Rng) -> Sampled {
    let n = levels.len();
    match ordering {
        Ordering::Curriculum | Ordering::ReverseCurriculum => {
            let l = if ordering == Ordering::Curriculum { state.level.min(n - 1) } else { n - 1 - state.level.min(n - 1) };
            let sets = &levels.levels[l].param_sets;
            let k = rng.gen_range(0..sets.len());
            Sampled { params: sets[k], source: Some((l, k)) }
        }
        Ordering::Random => {
            let total: usize = levels.levels.iter().map(|l| l.param_sets.len()).sum();
            let mut k = rng.gen_range(0..total);
            for (l, lv) in levels.levels.iter().enumerate() {
                if k < lv.param_sets.len() {
                    return Sampled { params: lv.param_sets[k], source: Some((l, k)) };
                }
                k -= lv.param_sets.len();
            }
            unreachable!("index below total")
        }
        Ordering::DomainRandomization => Sampled { params: sample_uniform_params(rng), source: None },
    }
}

/// Every parameter drawn independently and uniformly within its bounds.
pub fn sample_uniform_params(rng: &mut impl Rng) -> SimParams {
    let mut v = [0.0; N_PARAMS];
    for p in Param::ALL {
        let (lo, hi) = p.bounds();
        v[p.index()] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    }
    SimParams::from_array(v).expect("draw lies within bounds")
}

/// The environment surface the training loop drives.
pub trait WeighingTask {
    fn reset(&mut self, cfg: EpisodeConfig) -> Result<Observation, EnvError>;
    fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError>;
    fn episode_error(&self) -> Result<f64, EnvError>;
    /// Observation normalization `(w_scale, theta_max)`.
    fn scales(&self) -> (f64, f64);
}

impl WeighingTask for WeighingEnv {
    fn reset(&mut self, cfg: EpisodeConfig) -> Result<Observation, EnvError> {
        WeighingEnv::reset(self, cfg)
    }

    fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        self.apply_action(action)
    }

    fn episode_error(&self) -> Result<f64, EnvError> {
        WeighingEnv::episode_error(self)
    }

    fn scales(&self) -> (f64, f64) {
        (self.settings().w_scale, self.settings().theta_max)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub level: usize,
    pub ordering: String,
    pub theta_id: String,
    pub total_reward: f64,
    pub final_error_mg: f64,
}

/// Simulator failures end the episode as a total miss instead of aborting
/// training.
fn is_jam(e: &EnvError) -> bool {
    matches!(e, EnvError::Sim(_))
}

struct EpisodeResult {
    total_reward: f64,
    error: f64,
}

fn run_episode(
    env: &mut dyn WeighingTask,
    agent: &mut PolicyState,
    buffer: &mut ReplayBuffer,
    cfg: EpisodeConfig,
    explore: &mut ChaCha8Rng,
    env_steps: &mut usize,
) -> Result<EpisodeResult, TrainError> {
    let (w_scale, theta_max) = env.scales();
    let mut obs = env.reset(cfg)?.normalized(w_scale, theta_max);
    let mut total_reward = 0.0;
    for _ in 0..cfg.t_max {
        let a = if *env_steps < agent.config.warmup_steps {
            [explore.gen_range(-1.0..=1.0), explore.gen_range(-1.0..=1.0)]
        } else {
            agent.act(&obs, false, explore)
        };
        let out = env.step(Action::from_slice(&a))?;
        *env_steps += 1;
        let next = out.observation.normalized(w_scale, theta_max);
        buffer.push(Transition { obs, action: a, reward: out.reward, next_obs: next, done: out.done });
        total_reward += out.reward;
        if *env_steps >= agent.config.warmup_steps && buffer.len() >= agent.config.batch_size {
            for _ in 0..agent.config.updates_per_step {
                agent.update_from(buffer)?;
            }
        }
        obs = next;
        if out.done {
            break;
        }
    }
    Ok(EpisodeResult { total_reward, error: env.episode_error()? })
}

/// Called after every episode with its log row and the current policy.
pub type EpisodeHook<'a> = dyn FnMut(&EpisodeLog, &PolicyState) -> Result<(), TrainError> + 'a;

/// Runs `n_max` episodes of the configured ordering and returns the log.
/// Curricular orderings move through `levels` with [`advance_check`];
/// the baselines run as one level for the whole budget.
pub fn train(
    levels: &LevelSet,
    env: &mut dyn WeighingTask,
    agent: &mut PolicyState,
    config: &CurriculumConfig,
    hook: &mut EpisodeHook<'_>,
) -> Result<Vec<EpisodeLog>, TrainError> {
    config.validate()?;
    if levels.is_empty() && config.ordering != Ordering::DomainRandomization {
        return Err(TrainError::EmptyLevels);
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sample"));
    let mut explore = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "explore"));
    let env_seed = derive_seed(config.seed, "env");
    let mut buffer = ReplayBuffer::new(agent.config.buffer_capacity);
    let mut state = CurriculumState::default();
    let mut env_steps = 0;
    let mut log = Vec::with_capacity(config.n_max);

    for i in 0..config.n_max {
        let sampled = sample_config(levels, &state, config.ordering, &mut sample_rng);
        let cfg = EpisodeConfig {
            params: sampled.params,
            w_target: config.w_target_train,
            t_max: config.t_max,
            spoon_load_count: config.spoon_load_count,
            seed: child_seed(env_seed, i as u64),
        };
        let res = match run_episode(env, agent, &mut buffer, cfg, &mut explore, &mut env_steps) {
            Ok(r) => r,
            Err(TrainError::Env(e)) if is_jam(&e) => EpisodeResult { total_reward: 0.0, error: config.w_target_train },
            Err(e) => return Err(e),
        };
        let row = EpisodeLog {
            episode: i + 1,
            level: state.level,
            ordering: config.ordering.label().to_string(),
            theta_id: sampled.theta_id(),
            total_reward: res.total_reward,
            final_error_mg: res.error,
        };
        hook(&row, agent)?;
        log.push(row);

        state.push_error(res.error, config.k_queue);
        if config.ordering.is_curricular() && advance_check(&state, config) == Advance::Advance {
            apply_advance(&mut state, levels.len());
        }
    }
    Ok(log)
}
