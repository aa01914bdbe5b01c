//! Bayesian-optimization calibration of [`SimParams`] against a target angle
//! of repose.
//!
//! The loop proposes a parameter vector, evaluates the simulated angle,
//! appends the result to the history and accepts it when the error is under
//! the threshold. After `t_stagnation` iterations without acceptance the
//! search box shrinks to the spread of the best tenth of the history.

mod bounds;
pub mod gp;
mod history;

pub use bounds::{refine_bounds, top_box, top_records, Bounds};
pub use history::{read_history, AcceptedSets, HistoryLog, LogLine, HISTORY_SCHEMA_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lab::{run_aor_task, AoRScene, LabError};
use crate::rng::child_seed;
use crate::sim::{SimError, SimParams, SolverConfig, N_PARAMS};
use gp::{Gp, GpHyper};


#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("need at least 10 successful evaluations to refine bounds, have {0}")]
    InsufficientHistory(usize),
    #[error("bounds have zero width in dimension {0} and the initial design is exhausted")]
    DegenerateBounds(usize),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("history log: {0}")]
    Io(#[from] std::io::Error),
    #[error("history log: {0}")]
    Json(#[from] serde_json::Error),
}

/// One evaluated parameter vector. Failed evaluations carry an infinite error.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub theta: SimParams,
    pub error: f64,
    pub aor_sim: Option<f64>,
    pub failed: bool,
}

impl EvalRecord {
    /// Record for a mean simulated angle, or a failure when `aor_sim` is `None`.
    pub fn new(theta: SimParams, a_real: f64, aor_sim: Option<f64>) -> Self {
        match aor_sim {
            Some(a) => EvalRecord {
                theta,
                error: (a_real - a).abs(),
                aor_sim: Some(a),
                failed: false,
            },
            None => EvalRecord {
                theta,
                error: f64::INFINITY,
                aor_sim: None,
                failed: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_solutions: usize,
    /// Degrees.
    pub accept_threshold: f64,
    pub t_stagnation: usize,
    pub eval_budget: usize,
    pub init_samples: usize,
    pub repeats_per_eval: usize,
    /// Fraction of the full parameter range.
    pub min_bound_width: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_solutions: 3,
            accept_threshold: 1.5,
            t_stagnation: 15,
            eval_budget: 200,
            init_samples: 20,
            repeats_per_eval: 3,
            min_bound_width: 0.02,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibError> {
        let bad = |m: &str| Err(CalibError::InvalidConfig(m.to_string()));
        if self.n_solutions < 1 {
            return bad("n_solutions must be at least 1");
        }
        if !(self.accept_threshold > 0.0) {
            return bad("accept_threshold must be positive");
        }
        if self.init_samples < 1 {
            return bad("init_samples must be at least 1");
        }
        if self.eval_budget < self.init_samples {
            return bad("eval_budget must be at least init_samples");
        }
        if self.repeats_per_eval < 1 {
            return bad("repeats_per_eval must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.min_bound_width) {
            return bad("min_bound_width must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Surrogate {
    hyper: GpHyper,
    fitted_at: usize,
}

/// State of one calibration run.
#[derive(Clone, Debug)]
pub struct CalibrationHistory {
    pub records: Vec<EvalRecord>,
    pub bounds: Bounds,
    pub accepted: Vec<SimParams>,
    pub a_real: f64,
    pub stagnation_counter: usize,
    pub evals_used: usize,
    /// Number of refinements so far.
    pub bounds_epoch: usize,
    /// Set by a refinement that found no acceptance since the previous one.
    pub refined_without_accept: bool,
    accepted_at_refine: usize,
    design_shift: [f64; N_PARAMS],
    surrogate: Option<Surrogate>,
}

impl CalibrationHistory {
    pub fn new(a_real: f64, bounds: Bounds, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 0xd5));
        CalibrationHistory {
            records: Vec::new(),
            bounds,
            accepted: Vec::new(),
            a_real,
            stagnation_counter: 0,
            evals_used: 0,
            bounds_epoch: 0,
            refined_without_accept: false,
            accepted_at_refine: 0,
            design_shift: std::array::from_fn(|_| rng.gen()),
            surrogate: None,
        }
    }

    pub fn successful(&self) -> usize {
        self.records.iter().filter(|r| !r.failed).count()
    }

    /// Replaces the bounds with the refined box.
    pub fn refine(&mut self, min_width: f64) -> Result<(), CalibError> {
        self.bounds = refine_bounds(&self.records, min_width)?;
        self.bounds_epoch += 1;
        self.refined_without_accept = self.accepted.len() == self.accepted_at_refine;
        self.accepted_at_refine = self.accepted.len();
        Ok(())
    }
}

const PRIMES: [u64; N_PARAMS] = [2, 3, 5, 7, 11, 13, 17, 19, 23];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Point `index` of the shifted Halton sequence on the unit cube.
pub fn halton_point(index: u64, shift: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    std::array::from_fn(|k| (radical_inverse(index + 1, PRIMES[k]) + shift[k]).fract())
}

const EI_LOCAL_STARTS: usize = 5;
const HYPER_REFIT_EVERY: usize = 5;

/// Next parameter vector to evaluate.
pub fn propose(
    history: &mut CalibrationHistory,
    config: &CalibrationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SimParams, CalibError> {
    history.bounds.validate()?;
    let b = &history.bounds;
    if history.successful() < config.init_samples {
        let u = halton_point(history.records.len() as u64, &history.design_shift);
        return Ok(b.from_unit(&u));
    }
    if let Some(k) = (0..N_PARAMS).find(|&k| b.width(k) <= 0.0) {
        return Err(CalibError::DegenerateBounds(k));
    }

    let ok: Vec<&EvalRecord> = history.records.iter().filter(|r| !r.failed).collect();
    let xs: Vec<Vec<f64>> = ok.iter().map(|r| b.to_unit(&r.theta).to_vec()).collect();
    let ys: Vec<f64> = ok.iter().map(|r| r.error).collect();

    let refit = match &history.surrogate {
        None => true,
        Some(s) => history.evals_used >= s.fitted_at + HYPER_REFIT_EVERY,
    };
    if refit {
        let start = history
            .surrogate
            .as_ref()
            .map(|s| s.hyper.clone())
            .unwrap_or_else(|| GpHyper::default_for(N_PARAMS));
        let hyper = Gp::optimize_hyper(&xs, &ys, &start, rng);
        history.surrogate = Some(Surrogate {
            hyper,
            fitted_at: history.evals_used,
        });
    }
    let hyper = &history.surrogate.as_ref().expect("fitted above").hyper;
    let starts: Vec<Vec<f64>> = top_records(&history.records)
        .iter()
        .take(EI_LOCAL_STARTS)
        .map(|r| b.to_unit(&r.theta).to_vec())
        .filter(|u| u.iter().all(|v| (0.0..=1.0).contains(v)))
        .collect();
    let u = match gp::suggest(xs, &ys, hyper, &starts, rng) {
        Some(u) => u,
        None => (0..N_PARAMS).map(|_| rng.gen()).collect(),
    };
    let u: [f64; N_PARAMS] = u.try_into().expect("dimension");
    Ok(b.from_unit(&u))
}

/// Termination test.
pub fn should_stop(history: &CalibrationHistory, config: &CalibrationConfig) -> bool {
    history.evals_used >= config.eval_budget
        || (history.refined_without_accept && history.bounds.collapsed(config.min_bound_width))
}

/// The `top_k` successful parameter vectors by ascending error, earlier first on ties.
pub fn rank_solutions(history: &CalibrationHistory, top_k: usize) -> Vec<SimParams> {
    let mut ok: Vec<&EvalRecord> = history.records.iter().filter(|r| !r.failed).collect();
    ok.sort_by(|a, b| a.error.total_cmp(&b.error));
    ok.into_iter().take(top_k).map(|r| r.theta).collect()
}

/// Maps a parameter vector to an evaluation record.
pub trait Evaluator: Sync {
    fn evaluate(&self, theta: &SimParams, a_real: f64) -> Result<EvalRecord, CalibError>;
}

/// Evaluates by pouring piles in the virtual tester. Repeat `r` always uses
/// seed `child_seed(seed, r)`, so every candidate sees the same pours.
#[derive(Clone, Debug)]
pub struct AoREvaluator {
    pub scene: AoRScene,
    pub solver: SolverConfig,
    pub repeats: usize,
    pub seed: u64,
}

impl AoREvaluator {
    pub fn repeat_seed(&self, r: usize) -> u64 {
        child_seed(self.seed, r as u64)
    }

    /// Angles of the individual repeats; `None` for a jam or blowup.
    pub fn angles(&self, theta: &SimParams) -> Result<Vec<Option<f64>>, CalibError> {
        let runs: Vec<Result<Option<f64>, LabError>> = (0..self.repeats)
            .into_par_iter()
            .map(|r| match run_aor_task(theta, &self.scene, &self.solver, self.repeat_seed(r)) {
                Ok(m) => Ok(Some(m.aor_degrees)),
                Err(LabError::Jam { .. }) | Err(LabError::Sim(SimError::NumericalBlowup { .. })) => Ok(None),
                Err(e) => Err(e),
            })
            .collect();
        runs.into_iter().map(|r| r.map_err(CalibError::from)).collect()
    }
}

impl Evaluator for AoREvaluator {
    fn evaluate(&self, theta: &SimParams, a_real: f64) -> Result<EvalRecord, CalibError> {
        let ok: Vec<f64> = self.angles(theta)?.into_iter().flatten().collect();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        Ok(EvalRecord::new(*theta, a_real, mean))
    }
}

/// Evaluates with a plain function of the parameters, `None` meaning failure.
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&SimParams) -> Option<f64> + Sync,
{
    fn evaluate(&self, theta: &SimParams, a_real: f64) -> Result<EvalRecord, CalibError> {
        Ok(EvalRecord::new(*theta, a_real, (self.0)(theta)))
    }
}

/// Runs the calibration loop until `n_solutions` are accepted or the run stops.
/// Each evaluation is appended to `log` as it happens.
pub fn calibrate(
    a_real: f64,
    evaluator: &dyn Evaluator,
    config: &CalibrationConfig,
    seed: u64,
    mut log: Option<&mut HistoryLog>,
) -> Result<CalibrationHistory, CalibError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 0x0b));
    let mut h = CalibrationHistory::new(a_real, Bounds::table(), seed);

    while h.accepted.len() < config.n_solutions && !should_stop(&h, config) {
        let theta = propose(&mut h, config, &mut rng)?;
        let rec = evaluator.evaluate(&theta, a_real)?;
        if let Some(log) = log.as_deref_mut() {
            log.append(&LogLine::new(h.records.len(), &rec, h.bounds_epoch))?;
        }
        let accept = !rec.failed && rec.error < config.accept_threshold;
        h.records.push(rec);
        h.evals_used += 1;

        if accept {
            h.accepted.push(theta);
            h.stagnation_counter = 0;
        } else if h.successful() < config.init_samples {
            // the space-filling design is not a stagnating search
        } else if h.stagnation_counter >= config.t_stagnation {
            if h.successful() >= 10 {
                h.refine(config.min_bound_width)?;
            }
            h.stagnation_counter = 0;
            if should_stop(&h, config) {
                break;
            }
        } else {
            h.stagnation_counter += 1;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Param, PARAM_BOUNDS};

    fn normalized_sum(theta: &SimParams) -> f64 {
        let w = [1.0, 0.5, 0.8, 0.3, 1.2, 0.7, 0.4, 0.9, 0.6];
        theta
            .to_array()
            .iter()
            .enumerate()
            .map(|(k, v)| w[k] * (v - PARAM_BOUNDS[k].0) / (PARAM_BOUNDS[k].1 - PARAM_BOUNDS[k].0))
            .sum()
    }

    #[test]
    fn error_is_absolute_difference() {
        let r = EvalRecord::new(SimParams::midpoint(), 31.41, Some(30.0));
        assert!((r.error - 1.41).abs() < 1e-12);
        assert_eq!(EvalRecord::new(SimParams::midpoint(), 30.0, Some(30.0)).error, 0.0);
        let f = EvalRecord::new(SimParams::midpoint(), 30.0, None);
        assert!(f.failed && f.error.is_infinite());
    }

    #[test]
    fn halton_reference_points() {
        let p = halton_point(0, &[0.0; N_PARAMS]);
        assert_eq!(p[0], 0.5);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = halton_point(4, &[0.0; N_PARAMS]);
        // 5 in base 2 is 101 -> 0.101b = 0.625
        assert_eq!(p[0], 0.625);
        // 5 in base 3 is 12 -> 0.21t = 2/3 + 1/9
        assert!((p[1] - 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cold_start_is_deterministic_and_inside() {
        let cfg = CalibrationConfig::default();
        let mut a = CalibrationHistory::new(30.0, Bounds::table(), 4);
        let mut b = CalibrationHistory::new(30.0, Bounds::table(), 4);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let p = propose(&mut a, &cfg, &mut r1).unwrap();
        assert_eq!(p, propose(&mut b, &cfg, &mut r2).unwrap());
        assert!(Bounds::table().contains(&p));
    }

    #[test]
    fn ei_is_near_zero_at_incumbent() {
        let cfg = CalibrationConfig {
            init_samples: 5,
            ..Default::default()
        };
        let mut h = CalibrationHistory::new(0.0, Bounds::table(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..12 {
            let theta = propose(&mut h, &cfg, &mut rng).unwrap();
            let e = if i == 3 { 0.0 } else { 10.0 };
            h.records.push(EvalRecord::new(theta, 0.0, Some(e)));
            h.evals_used += 1;
        }
        let p = propose(&mut h, &cfg, &mut rng).unwrap();
        assert!(h.bounds.contains(&p));

        let b = &h.bounds;
        let xs: Vec<Vec<f64>> = h.records.iter().map(|r| b.to_unit(&r.theta).to_vec()).collect();
        let ys: Vec<f64> = h.records.iter().map(|r| r.error).collect();
        let gp = Gp::fit(xs.clone(), &ys, h.surrogate.clone().unwrap().hyper).unwrap();
        assert!(gp.expected_improvement(&xs[3]) < 1e-3);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q: Vec<f64> = (0..N_PARAMS).map(|_| r.gen()).collect();
            assert!(gp.expected_improvement(&q) >= 0.0);
        }
    }

    #[test]
    fn one_dimensional_search_finds_minimum() {
        let f = |x: f64| (x - 0.3).abs();
        // brute-force grid oracle locates the minimum
        let grid_min = (0..=1000)
            .map(|i| f(i as f64 / 1000.0))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(grid_min, 300);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs: Vec<Vec<f64>> = (0..5).map(|i| vec![radical_inverse(i + 1, 2)]).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| f(x[0])).collect();
        let mut hyper = GpHyper::default_for(1);
        while xs.len() < 30 {
            if xs.len() % HYPER_REFIT_EVERY == 0 {
                hyper = Gp::optimize_hyper(&xs, &ys, &hyper, &mut rng);
            }
            let u = gp::suggest(xs.clone(), &ys, &hyper, &[], &mut rng).unwrap();
            ys.push(f(u[0]));
            xs.push(u);
        }
        let best = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best <= 0.02, "best {best}");
    }

    #[test]
    fn degenerate_bounds_after_design() {
        let mut lo = Bounds::table().lo;
        let hi = Bounds::table().hi;
        lo[2] = hi[2];
        let mut h = CalibrationHistory::new(0.0, Bounds { lo, hi }, 0);
        let cfg = CalibrationConfig {
            init_samples: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2 {
            let t = propose(&mut h, &cfg, &mut rng).unwrap();
            h.records.push(EvalRecord::new(t, 0.0, Some(1.0)));
        }
        assert!(matches!(propose(&mut h, &cfg, &mut rng), Err(CalibError::DegenerateBounds(2))));
    }

    #[test]
    fn refine_keeps_top_two_of_twenty() {
        let mut records: Vec<EvalRecord> = (0..20)
            .map(|i| EvalRecord::new(SimParams::midpoint().with(Param::Friction, 0.02 * i as f64), 0.0, Some(10.0 + i as f64)))
            .collect();
        records[7] = EvalRecord::new(
            SimParams::midpoint().with(Param::Friction, 0.4).with(Param::Cohesion, 0.2),
            0.0,
            Some(0.5),
        );
        records[13] = EvalRecord::new(
            SimParams::midpoint().with(Param::Friction, 0.6).with(Param::Cohesion, 0.9),
            0.0,
            Some(0.7),
        );
        let raw = top_box(&records).unwrap();
        let f = Param::Friction.index();
        let c = Param::Cohesion.index();
        assert_eq!((raw.lo[f], raw.hi[f]), (0.4, 0.6));
        assert_eq!((raw.lo[c], raw.hi[c]), (0.2, 0.9));

        let out = refine_bounds(&records, 0.02).unwrap();
        assert_eq!((out.lo[f], out.hi[f]), (0.4, 0.6));
        // diameter collapsed to the midpoint 0.27, widened to 2% of 0.1
        let d = Param::ParticleDiameter.index();
        assert!((out.width(d) - 0.002).abs() < 1e-12);
        assert!((out.lo[d] - 0.269).abs() < 1e-12);
        assert!(out.is_within(&Bounds::table()));
    }

    #[test]
    fn widening_is_clipped_at_the_table() {
        let records: Vec<EvalRecord> = (0..10)
            .map(|i| EvalRecord::new(SimParams::lower_bound(), 0.0, Some(i as f64)))
            .collect();
        let out = refine_bounds(&records, 0.5).unwrap();
        assert_eq!(out.lo, Bounds::table().lo);
        for k in 0..N_PARAMS {
            assert!((out.width(k) - 0.25 * Bounds::table().width(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_conditions() {
        let cfg = CalibrationConfig::default();
        let mut h = CalibrationHistory::new(0.0, Bounds::table(), 0);
        assert!(!should_stop(&h, &cfg));
        h.evals_used = cfg.eval_budget;
        assert!(should_stop(&h, &cfg));

        let mut h = CalibrationHistory::new(0.0, Bounds::table(), 0);
        h.records = (0..10)
            .map(|i| EvalRecord::new(SimParams::midpoint(), 0.0, Some(5.0 + i as f64)))
            .collect();
        h.refine(cfg.min_bound_width).unwrap();
        assert!(h.bounds.collapsed(cfg.min_bound_width));
        assert!(should_stop(&h, &cfg));

        // an acceptance since the last refinement keeps the run going
        let mut h2 = CalibrationHistory::new(0.0, Bounds::table(), 0);
        h2.records = h.records.clone();
        h2.accepted.push(SimParams::midpoint());
        h2.refine(cfg.min_bound_width).unwrap();
        assert!(!should_stop(&h2, &cfg));
    }

    #[test]
    fn infinite_threshold_accepts_every_evaluation() {
        let cfg = CalibrationConfig {
            accept_threshold: f64::INFINITY,
            n_solutions: 4,
            ..Default::default()
        };
        let h = calibrate(0.0, &FnEvaluator(|_: &SimParams| Some(3.0)), &cfg, 1, None).unwrap();
        assert_eq!(h.accepted.len(), 4);
        assert_eq!(h.evals_used, 4);
    }

    #[test]
    fn budget_equal_to_design_stops_after_design() {
        let cfg = CalibrationConfig {
            eval_budget: 20,
            init_samples: 20,
            accept_threshold: 0.3,
            ..Default::default()
        };
        let h = calibrate(0.0, &FnEvaluator(|t: &SimParams| Some(normalized_sum(t))), &cfg, 2, None).unwrap();
        assert_eq!(h.records.len(), 20);
        let want: Vec<SimParams> = h.records.iter().filter(|r| r.error < 0.3).map(|r| r.theta).take(3).collect();
        assert_eq!(h.accepted, want);
    }

    #[test]
    fn failures_are_never_accepted() {
        let cfg = CalibrationConfig {
            eval_budget: 30,
            init_samples: 5,
            accept_threshold: f64::INFINITY,
            ..Default::default()
        };
        let h = calibrate(0.0, &FnEvaluator(|_: &SimParams| None), &cfg, 0, None).unwrap();
        assert!(h.accepted.is_empty());
        assert_eq!(h.records.len(), 30);
    }

    #[test]
    fn ranking_breaks_ties_by_order() {
        let mut h = CalibrationHistory::new(0.0, Bounds::table(), 0);
        let a = SimParams::midpoint().with(Param::Friction, 0.1);
        let b = SimParams::midpoint().with(Param::Friction, 0.2);
        let c = SimParams::midpoint().with(Param::Friction, 0.3);
        h.records = vec![
            EvalRecord::new(c, 0.0, Some(3.0)),
            EvalRecord::new(a, 0.0, Some(1.0)),
            EvalRecord::new(SimParams::midpoint(), 0.0, None),
            EvalRecord::new(b, 0.0, Some(1.0)),
        ];
        assert_eq!(rank_solutions(&h, 1), vec![a]);
        assert_eq!(rank_solutions(&h, 10), vec![a, b, c]);
    }

    #[test]
    fn analytic_objective_accepts_within_150() {
        let cfg = CalibrationConfig {
            accept_threshold: 0.05,
            n_solutions: 1,
            eval_budget: 150,
            ..Default::default()
        };
        let h = calibrate(0.0, &FnEvaluator(|t: &SimParams| Some(normalized_sum(t))), &cfg, 11, None).unwrap();
        assert_eq!(h.accepted.len(), 1, "best {:?}", rank_solutions(&h, 1));
        assert!(h.evals_used <= 150);
    }
}
