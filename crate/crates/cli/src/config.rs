use std::fs;
use std::path::{Path, PathBuf};

use flip_core::calibrate::CalibrationConfig;
use flip_core::env::EnvSettings;
use flip_core::lab::{bundled_materials, AoRScene, MaterialTarget};
use flip_core::rng::derive_seed;
use flip_core::sac::SacConfig;
use flip_core::sim::{SimParams, SolverConfig};
use flip_core::trainer::CurriculumConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything a run needs. Scalars precede the tables so the struct
/// serializes back to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Angle-of-repose range, degrees, that training levels must fall in.
    pub flow_range: [f64; 2],
    pub sim: SolverConfig,
    pub aor_scene: AoRScene,
    pub calibration: CalibrationConfig,
    pub environment: EnvSettings,
    pub sac: SacConfig,
    pub curriculum: CurriculumConfig,
    /// Empty means the bundled measurements.
    pub materials: Vec<MaterialTarget>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 0,
            output_dir: PathBuf::from("run"),
            flow_range: [28.0, 37.0],
            sim: SolverConfig::default(),
            aor_scene: AoRScene::default(),
            calibration: CalibrationConfig::default(),
            environment: EnvSettings::default(),
            sac: SacConfig::default(),
            curriculum: CurriculumConfig::default(),
            materials: Vec::new(),
        }
    }
}

/// Sub-stream seed stored in a config section, cut to 53 bits so it
/// survives TOML and JSON readers.
fn section_seed(master: u64, name: &str) -> u64 {
    derive_seed(master, name) >> 11
}

/// Named sub-streams of the master seed.
pub struct Seeds {
    pub calibration: u64,
    pub aor: u64,
    pub eval: u64,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {}", path.display(), e.message())))?
        };
        Ok(cfg)
    }

    /// Applies command-line overrides, fills defaults and derived seeds,
    /// and validates every section.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        if self.materials.is_empty() {
            self.materials = bundled_materials();
        }
        self.sac.seed = section_seed(self.master_seed, "agent");
        self.curriculum.seed = section_seed(self.master_seed, "env");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::validation(format!("unsupported config schema_version {}", self.schema_version)));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(CliError::validation("master_seed must fit in a signed 64-bit integer"));
        }
        let [lo, hi] = self.flow_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(CliError::validation("flow_range must be an ordered pair of angles"));
        }
        self.sim.validate()?;
        self.aor_scene.validate(&SimParams::midpoint(), &self.sim)?;
        self.calibration.validate()?;
        self.environment.validate()?;
        self.sac.validate()?;
        self.curriculum.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            calibration: derive_seed(self.master_seed, "calibration"),
            aor: derive_seed(self.master_seed, "aor"),
            eval: derive_seed(self.master_seed, "eval"),
        }
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Writes `config.resolved.json` into the run directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(dir.join("config.resolved.json"), s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_is_a_fixpoint() {
        let a = RunConfig::default().resolve(Some(9), None).unwrap();
        let b: RunConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.clone().resolve(None, None).unwrap(), b);
        let c: RunConfig = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("master_seed = 1\nbogus = 2\n").is_err());
        assert!(toml::from_str::<RunConfig>("[sac]\ngama = 0.9\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("[curriculum]\nn_max = 10\n").unwrap();
        assert_eq!(c.curriculum.n_max, 10);
        assert_eq!(c.curriculum.k_queue, 20);
        assert_eq!(c.sac.hidden_sizes, vec![256, 256]);
    }

    #[test]
    fn invalid_section_fails_validation() {
        let c: RunConfig = toml::from_str("[sac]\ngamma = 1.5\n").unwrap();
        let e = c.resolve(None, None).unwrap_err();
        assert_eq!(e.code, 3);
    }

    #[test]
    fn seeds_are_named_streams() {
        let c = RunConfig::default().resolve(Some(1), None).unwrap();
        let d = RunConfig::default().resolve(Some(2), None).unwrap();
        assert_ne!(c.sac.seed, d.sac.seed);
        assert_ne!(c.seeds().eval, c.seeds().calibration);
    }
}
