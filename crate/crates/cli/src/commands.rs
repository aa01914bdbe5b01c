use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use flip_core::calibrate::{calibrate, AcceptedSets, AoREvaluator, HistoryLog};
use flip_core::env::WeighingEnv;
use flip_core::lab::{find_material, run_aor_task};
use flip_core::sac::{load_checkpoint, save_checkpoint, PolicyState};
use flip_core::sim::SimParams;
use flip_core::trainer::{
    build_levels, evaluate, train, EvalSpec, LevelSet, MaterialSets, Ordering, TrainError, WeighingTask,
    LEVELS_SCHEMA_VERSION,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_EVERY: usize = 100;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(path, e))
}

pub fn measure_aor(cfg: &RunConfig, params_file: &Path, write_out: bool) -> Result<(), CliError> {
    let params: SimParams = serde_json::from_str(&read_text(params_file)?)?;
    let metrics = run_aor_task(&params, &cfg.aor_scene, &cfg.sim, cfg.seeds().aor)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    println!("{json}");
    if write_out {
        cfg.write_resolved(&cfg.output_dir)?;
        write_json(&cfg.output_dir.join("aor.json"), &metrics)?;
    }
    Ok(())
}

pub enum CalibTarget {
    Material(String),
    Angle(f64),
}

pub fn calibrate_cmd(cfg: &RunConfig, target: CalibTarget) -> Result<(), CliError> {
    let (label, a_real) = match target {
        CalibTarget::Material(name) => {
            let m = find_material(&cfg.materials, &name)?;
            (m.name.clone(), m.aor_degrees_mean)
        }
        CalibTarget::Angle(a) => {
            if !(a.is_finite() && a > 0.0 && a < 90.0) {
                return Err(CliError::validation(format!("target angle {a} outside (0, 90)")));
            }
            (format!("synthetic-{a}"), a)
        }
    };
    let dir = cfg.output_dir.join("calibration");
    fs::create_dir_all(&dir)?;
    cfg.write_resolved(&cfg.output_dir)?;

    let evaluator = AoREvaluator {
        scene: cfg.aor_scene.clone(),
        solver: cfg.sim.clone(),
        repeats: cfg.calibration.repeats_per_eval,
        seed: cfg.seeds().calibration,
    };
    let mut log = HistoryLog::create(&dir.join("history.jsonl"))?;
    let h = calibrate(a_real, &evaluator, &cfg.calibration, cfg.seeds().calibration, Some(&mut log))?;
    drop(log);

    let sets = AcceptedSets::new(&label, a_real, cfg.calibration.accept_threshold, h.accepted.clone());
    sets.save(&dir.join("accepted.json"))?;
    eprintln!(
        "{label}: target {a_real} deg, {} of {} sets accepted after {} evaluations",
        h.accepted.len(),
        cfg.calibration.n_solutions,
        h.evals_used
    );
    if h.accepted.is_empty() {
        return Err(CliError::runtime(format!("no parameter set came within {} deg", cfg.calibration.accept_threshold)));
    }
    Ok(())
}

/// Reads accepted-set files and level files into one list of accepted sets.
fn read_sets(files: &[PathBuf]) -> Result<Vec<AcceptedSets>, CliError> {
    let mut out = Vec::new();
    for f in files {
        let text = read_text(f)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        if v.get("levels").is_some() {
            let ls: LevelSet = serde_json::from_value(v)?;
            if ls.schema_version != LEVELS_SCHEMA_VERSION {
                return Err(CliError::validation(format!("{}: unsupported schema_version", f.display())));
            }
            out.extend(ls.levels.into_iter().map(|l| AcceptedSets::new(&l.material_label, l.target_aor, 0.0, l.param_sets)));
        } else {
            let s = AcceptedSets::load(f).map_err(|e| CliError::validation(format!("{}: {e}", f.display())))?;
            out.push(s);
        }
    }
    Ok(out)
}

/// Level files given on the command line, else the run directory's own.
fn default_set_files(cfg: &RunConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if !given.is_empty() {
        return given.to_vec();
    }
    [cfg.output_dir.join("levels.json"), cfg.output_dir.join("calibration").join("accepted.json")]
        .into_iter()
        .find(|p| p.exists())
        .into_iter()
        .collect()
}

fn make_env(cfg: &RunConfig) -> Result<WeighingEnv, CliError> {
    Ok(WeighingEnv::new(cfg.environment.clone(), cfg.sim.clone())?)
}

pub fn train_cmd(cfg: &RunConfig, ordering: Ordering, level_files: &[PathBuf]) -> Result<(), CliError> {
    let files = default_set_files(cfg, level_files);
    let levels = if files.is_empty() {
        if ordering != Ordering::DomainRandomization {
            return Err(CliError::usage("--levels is required unless --ordering dr"));
        }
        LevelSet { schema_version: LEVELS_SCHEMA_VERSION, levels: Vec::new(), flow_range: cfg.flow_range }
    } else {
        build_levels(&read_sets(&files)?, cfg.flow_range, cfg.curriculum.per_level)?
    };
    cfg.write_resolved(&cfg.output_dir)?;
    if !levels.is_empty() {
        write_json(&cfg.output_dir.join("levels.json"), &levels)?;
    }

    let train_dir = cfg.output_dir.join("train");
    let ckpt_dir = train_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut writer = csv::Writer::from_path(train_dir.join("log.csv"))?;

    let mut config = cfg.curriculum.clone();
    config.ordering = ordering;
    let mut env = make_env(cfg)?;
    let mut agent = PolicyState::new(cfg.sac.clone())?;
    let n_max = config.n_max;
    let window = config.k_queue;
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(window);
    let mut best = f64::INFINITY;

    let mut hook = |row: &flip_core::trainer::EpisodeLog, p: &PolicyState| -> Result<(), TrainError> {
        let io = |e: &dyn std::fmt::Display| TrainError::Hook(e.to_string());
        writer.serialize(row).map_err(|e| io(&e))?;
        writer.flush().map_err(|e| io(&e))?;
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(row.final_error_mg);
        let score = recent.iter().sum::<f64>() / recent.len() as f64;
        if score < best {
            best = score;
            save_checkpoint(p, &ckpt_dir.join("best.ckpt")).map_err(|e| io(&e))?;
        }
        if row.episode % CHECKPOINT_EVERY == 0 || row.episode == n_max {
            save_checkpoint(p, &ckpt_dir.join(format!("ep{:06}.ckpt", row.episode))).map_err(|e| io(&e))?;
        }
        Ok(())
    };
    let log = train(&levels, &mut env, &mut agent, &config, &mut hook)?;
    let last = log.last().map(|r| (r.level, r.final_error_mg)).unwrap_or_default();
    eprintln!("{} episodes, final level {}, last error {:.3} mg", log.len(), last.0, last.1);
    Ok(())
}

pub fn eval_cmd(
    cfg: &RunConfig,
    policy: &Path,
    targets: &[f64],
    runs: usize,
    set_files: &[PathBuf],
) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::usage("--runs must be at least 1"));
    }
    if targets.is_empty() || targets.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::usage("--targets must be positive masses"));
    }
    if !policy.exists() {
        return Err(CliError::input(policy, std::io::ErrorKind::NotFound.into()));
    }
    let agent = load_checkpoint(policy, Some(&cfg.sac))?;
    let files = default_set_files(cfg, set_files);
    if files.is_empty() {
        return Err(CliError::usage("--sets is required when the run directory has no levels.json"));
    }
    let materials: Vec<MaterialSets> = read_sets(&files)?
        .into_iter()
        .map(|s| MaterialSets { label: s.material, param_sets: s.param_sets })
        .collect();
    let spec = EvalSpec {
        runs,
        t_max: cfg.curriculum.t_max,
        spoon_load_count: cfg.curriculum.spoon_load_count,
        seed: cfg.seeds().eval,
    };
    make_env(cfg)?;
    let report = evaluate(&agent, &materials, targets, spec, || -> Box<dyn WeighingTask> {
        Box::new(make_env(cfg).expect("settings validated above"))
    })?;
    cfg.write_resolved(&cfg.output_dir)?;
    let dir = cfg.output_dir.join("eval");
    write_json(&dir.join("report.json"), &report)?;
    let table = report.render_table();
    fs::write(dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
