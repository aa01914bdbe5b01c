use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{is_jam, TrainError, WeighingTask};
use crate::env::{Action, EpisodeConfig};
use crate::rng::child_seed;
use crate::sac::{PolicyState, ACT_DIM, OBS_DIM};
use crate::sim::SimParams;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Anything that maps a normalized observation to a normalized action.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64; OBS_DIM], deterministic: bool, rng: &mut ChaCha8Rng) -> [f64; ACT_DIM];
}

impl Policy for PolicyState {
    fn act(&self, obs: &[f64; OBS_DIM], deterministic: bool, rng: &mut ChaCha8Rng) -> [f64; ACT_DIM] {
        PolicyState::act(self, obs, deterministic, rng)
    }
}

/// A material to evaluate on; run `r` uses `param_sets[r % len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSets {
    pub label: String,
    pub param_sets: Vec<SimParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub material: String,
    pub target_mg: f64,
    pub mean_error_mg: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_error_mg: f64,
    pub errors_mg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub runs: usize,
    pub episodes: usize,
    pub rows: Vec<EvalRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    /// Materials as rows, one `mean ± std` column per target.
    pub fn render_table(&self) -> String {
        let mut targets: Vec<f64> = Vec::new();
        let mut materials: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !targets.contains(&r.target_mg) {
                targets.push(r.target_mg);
            }
            if !materials.contains(&r.material.as_str()) {
                materials.push(&r.material);
            }
        }
        let width = materials.iter().map(|m| m.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}", "material");
        for t in &targets {
            let _ = write!(out, " | {:>15}", format!("{t} mg"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + targets.len() * 18));
        out.push('\n');
        for m in materials {
            let _ = write!(out, "{m:<width$}");
            for t in &targets {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.material == m && r.target_mg == *t)
                    .map(|r| format!("{:.2} ± {:.2}", r.mean_error_mg, r.std_error_mg))
                    .unwrap_or_default();
                let _ = write!(out, " | {cell:>15}");
            }
            out.push('\n');
        }
        out
    }
}

/// Episode settings shared by every evaluation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSpec {
    pub runs: usize,
    pub t_max: usize,
    pub spoon_load_count: usize,
    pub seed: u64,
}

/// Runs `spec.runs` deterministic episodes for every (material, target)
/// pair, in parallel, and reports the final absolute errors. A jammed
/// episode counts as missing the whole target.
pub fn evaluate<F>(
    policy: &dyn Policy,
    materials: &[MaterialSets],
    targets: &[f64],
    spec: EvalSpec,
    make_env: F,
) -> Result<EvalReport, TrainError>
where
    F: Fn() -> Box<dyn WeighingTask> + Sync,
{
    if spec.runs == 0 {
        return Err(TrainError::InvalidConfig("runs must be at least 1".into()));
    }
    if let Some(m) = materials.iter().find(|m| m.param_sets.is_empty()) {
        return Err(TrainError::InvalidConfig(format!("material {} has no parameter sets", m.label)));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..materials.len())
        .flat_map(|m| (0..targets.len()).flat_map(move |t| (0..spec.runs).map(move |r| (m, t, r))))
        .collect();
    let errors = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(m, t, r))| {
            let sets = &materials[m].param_sets;
            let cfg = EpisodeConfig {
                params: sets[r % sets.len()],
                w_target: targets[t],
                t_max: spec.t_max,
                spoon_load_count: spec.spoon_load_count,
                seed: child_seed(spec.seed, i as u64),
            };
            let mut env = make_env();
            match run_deterministic(policy, env.as_mut(), cfg) {
                Err(TrainError::Env(e)) if is_jam(&e) => Ok(cfg.w_target),
                other => other,
            }
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;

    let mut rows = Vec::with_capacity(materials.len() * targets.len());
    for (mi, m) in materials.iter().enumerate() {
        for (ti, &t) in targets.iter().enumerate() {
            let start = (mi * targets.len() + ti) * spec.runs;
            let errs = errors[start..start + spec.runs].to_vec();
            let (mean, std) = mean_std(&errs);
            rows.push(EvalRow {
                material: m.label.clone(),
                target_mg: t,
                mean_error_mg: mean,
                std_error_mg: std,
                errors_mg: errs,
            });
        }
    }
    Ok(EvalReport { schema_version: REPORT_SCHEMA_VERSION, runs: spec.runs, episodes: jobs.len(), rows })
}

fn run_deterministic(policy: &dyn Policy, env: &mut dyn WeighingTask, cfg: EpisodeConfig) -> Result<f64, TrainError> {
    let (w_scale, theta_max) = env.scales();
    let mut obs = env.reset(cfg)?.normalized(w_scale, theta_max);
    // unused in deterministic mode, kept for the trait signature
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.t_max {
        let a = policy.act(&obs, true, &mut rng);
        let out = env.step(Action::from_slice(&a))?;
        obs = out.observation.normalized(w_scale, theta_max);
        if out.done {
            break;
        }
    }
    Ok(env.episode_error()?)
}
