mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flip_core::trainer::Ordering;

use commands::CalibTarget;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "flip", version, about = "Powder calibration and weighing-policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Curriculum,
    Reverse,
    Random,
    Dr,
}

impl From<OrderingArg> for Ordering {
    fn from(o: OrderingArg) -> Self {
        match o {
            OrderingArg::Curriculum => Ordering::Curriculum,
            OrderingArg::Reverse => Ordering::ReverseCurriculum,
            OrderingArg::Random => Ordering::Random,
            OrderingArg::Dr => Ordering::DomainRandomization,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pour a pile with one parameter set and print its metrics as JSON.
    MeasureAor {
        #[command(flatten)]
        common: Common,
        /// JSON file holding the parameter set.
        #[arg(long)]
        params: PathBuf,
    },
    /// Fit simulator parameters to a measured angle of repose.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Material from the measurement table.
        #[arg(long, conflicts_with = "target_aor", required_unless_present = "target_aor")]
        material: Option<String>,
        /// Explicit target angle in degrees.
        #[arg(long)]
        target_aor: Option<f64>,
    },
    /// Train a weighing policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "curriculum")]
        ordering: OrderingArg,
        /// Accepted-set or level files, comma separated.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<PathBuf>,
        /// Episode budget; overrides the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate a checkpoint on every material and target.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Target masses in mg, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "15,20")]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Accepted-set or level files naming the materials, comma separated.
        #[arg(long, value_delimiter = ',')]
        sets: Vec<PathBuf>,
    },
    /// Draw training curves for a run or a directory of runs.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Moving-average window in episodes.
        #[arg(long, default_value_t = 20)]
        smooth: usize,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.resolve(common.seed, common.out.clone())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MeasureAor { common, params } => {
            let cfg = load(&common)?;
            commands::measure_aor(&cfg, &params, common.out.is_some())
        }
        Command::Calibrate { common, material, target_aor } => {
            let cfg = load(&common)?;
            let target = match (material, target_aor) {
                (Some(m), None) => CalibTarget::Material(m),
                (None, Some(a)) => CalibTarget::Angle(a),
                _ => return Err(CliError::usage("give exactly one of --material and --target-aor")),
            };
            commands::calibrate_cmd(&cfg, target)
        }
        Command::Train { common, ordering, levels, episodes } => {
            let mut cfg = load(&common)?;
            if let Some(n) = episodes {
                cfg.curriculum.n_max = n;
                cfg.validate()?;
            }
            commands::train_cmd(&cfg, ordering.into(), &levels)
        }
        Command::Eval { common, policy, targets, runs, sets } => {
            let cfg = load(&common)?;
            commands::eval_cmd(&cfg, &policy, &targets, runs, &sets)
        }
        Command::Plot { common, run_dir, smooth } => {
            let dir = match run_dir {
                Some(d) => d,
                None => load(&common)?.output_dir,
            };
            plot::plot_run(&dir, smooth)
        }
    }
}

/// `FLIP_THREADS` caps the worker pool.
fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("FLIP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("FLIP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}
