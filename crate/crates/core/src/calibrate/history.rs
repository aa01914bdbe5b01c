use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CalibError, EvalRecord};
use crate::sim::SimParams;

pub const HISTORY_SCHEMA_VERSION: u32 = 1;

/// One line of the JSON-lines history log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub schema_version: u32,
    pub iter: usize,
    pub theta: SimParams,
    pub aor_sim: Option<f64>,
    /// `null` for failed evaluations.
    pub error: Option<f64>,
    pub failed: bool,
    pub bounds_epoch: usize,
}

impl LogLine {
    pub fn new(iter: usize, r: &EvalRecord, bounds_epoch: usize) -> Self {
        LogLine {
            schema_version: HISTORY_SCHEMA_VERSION,
            iter,
            theta: r.theta,
            aor_sim: r.aor_sim,
            error: (!r.failed).then_some(r.error),
            failed: r.failed,
            bounds_epoch,
        }
    }

    pub fn to_record(&self) -> EvalRecord {
        EvalRecord {
            theta: self.theta,
            error: self.error.unwrap_or(f64::INFINITY),
            aor_sim: self.aor_sim,
            failed: self.failed,
        }
    }
}

/// Append-only history writer. Every line is flushed as it is written.
pub struct HistoryLog {
    out: Box<dyn Write + Send>,
}

impl HistoryLog {
    pub fn create(path: &Path) -> Result<Self, CalibError> {
        Ok(Self::from_writer(BufWriter::new(File::create(path)?)))
    }

    pub fn from_writer(w: impl Write + Send + 'static) -> Self {
        HistoryLog { out: Box::new(w) }
    }

    pub fn append(&mut self, line: &LogLine) -> Result<(), CalibError> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_history(path: &Path) -> Result<Vec<LogLine>, CalibError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LogLine = serde_json::from_str(&line)?;
        if l.schema_version != HISTORY_SCHEMA_VERSION {
            return Err(CalibError::InvalidConfig(format!(
                "unsupported history schema_version {}",
                l.schema_version
            )));
        }
        out.push(l);
    }
    Ok(out)
}

/// Accepted parameter sets for one material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptedSets {
    pub schema_version: u32,
    pub material: String,
    pub target_aor: f64,
    pub accept_threshold: f64,
    pub param_sets: Vec<SimParams>,
}

impl AcceptedSets {
    pub fn new(material: &str, target_aor: f64, accept_threshold: f64, param_sets: Vec<SimParams>) -> Self {
        AcceptedSets {
            schema_version: HISTORY_SCHEMA_VERSION,
            material: material.to_string(),
            target_aor,
            accept_threshold,
            param_sets,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let s: AcceptedSets = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if s.schema_version != HISTORY_SCHEMA_VERSION {
            return Err(CalibError::InvalidConfig(format!(
                "unsupported accepted-sets schema_version {}",
                s.schema_version
            )));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_record_serializes_null_error() {
        let r = EvalRecord::new(SimParams::midpoint(), 30.0, None);
        let v = serde_json::to_value(LogLine::new(4, &r, 1)).unwrap();
        assert!(v["error"].is_null());
        assert_eq!(v["failed"], true);
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["iter"], 4);
        assert!(v["theta"]["friction"].is_number());
    }

    #[test]
    fn log_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        let mut log = HistoryLog::create(&p).unwrap();
        let a = EvalRecord::new(SimParams::midpoint(), 30.0, Some(28.0));
        let b = EvalRecord::new(SimParams::lower_bound(), 30.0, None);
        log.append(&LogLine::new(0, &a, 0)).unwrap();
        log.append(&LogLine::new(1, &b, 0)).unwrap();
        drop(log);
        let lines = read_history(&p).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].to_record(), a);
        assert_eq!(lines[1].to_record(), b);
    }
}
