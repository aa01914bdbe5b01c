use serde::{Deserialize, Serialize};

use super::{CalibError, EvalRecord};
use crate::sim::{SimParams, N_PARAMS, PARAM_BOUNDS};

/// Box of admissible parameter values, one `[lo, hi]` per [`SimParams`] field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; N_PARAMS],
    pub hi: [f64; N_PARAMS],
}

impl Bounds {
    /// The full simulator intervals.
    pub fn table() -> Self {
        Bounds {
            lo: PARAM_BOUNDS.map(|b| b.0),
            hi: PARAM_BOUNDS.map(|b| b.1),
        }
    }

    pub fn width(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        for k in 0..N_PARAMS {
            let (tlo, thi) = PARAM_BOUNDS[k];
            let (lo, hi) = (self.lo[k], self.hi[k]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= tlo && hi <= thi) {
                return Err(CalibError::InvalidBounds(format!(
                    "dimension {k}: [{lo}, {hi}] not inside [{tlo}, {thi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &SimParams) -> bool {
        theta
            .to_array()
            .iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lo[k] && v <= self.hi[k])
    }

    /// `true` when every box also lies inside `other`.
    pub fn is_within(&self, other: &Bounds) -> bool {
        (0..N_PARAMS).all(|k| self.lo[k] >= other.lo[k] && self.hi[k] <= other.hi[k])
    }

    /// Maps `theta` to the unit cube of this box. Zero-width dimensions map to 0.5.
    pub fn to_unit(&self, theta: &SimParams) -> [f64; N_PARAMS] {
        let v = theta.to_array();
        let mut u = [0.5; N_PARAMS];
        for k in 0..N_PARAMS {
            let w = self.width(k);
            if w > 0.0 {
                u[k] = (v[k] - self.lo[k]) / w;
            }
        }
        u
    }

    /// Inverse of [`Self::to_unit`], clamped into the box.
    pub fn from_unit(&self, u: &[f64; N_PARAMS]) -> SimParams {
        let mut v = [0.0; N_PARAMS];
        for k in 0..N_PARAMS {
            v[k] = (self.lo[k] + u[k].clamp(0.0, 1.0) * self.width(k)).clamp(self.lo[k], self.hi[k]);
        }
        SimParams::from_array(v).expect("point inside bounds")
    }

    /// Whether every dimension is at most `frac` of the table width.
    pub fn collapsed(&self, frac: f64) -> bool {
        let table = Bounds::table();
        (0..N_PARAMS).all(|k| self.width(k) <= frac * table.width(k) * (1.0 + 1e-9))
    }
}

/// The best `ceil(10%)` non-failed records, ascending by error, ties by order.
pub fn top_records(records: &[EvalRecord]) -> Vec<&EvalRecord> {
    let mut ok: Vec<&EvalRecord> = records.iter().filter(|r| !r.failed).collect();
    ok.sort_by(|a, b| a.error.total_cmp(&b.error));
    let n = ok.len().div_ceil(10);
    ok.truncate(n);
    ok
}

/// Coordinate-wise min/max over the top 10% of records, before widening.
pub fn top_box(records: &[EvalRecord]) -> Result<Bounds, CalibError> {
    let ok = records.iter().filter(|r| !r.failed).count();
    if ok < 10 {
        return Err(CalibError::InsufficientHistory(ok));
    }
    let top = top_records(records);
    let mut lo = [f64::INFINITY; N_PARAMS];
    let mut hi = [f64::NEG_INFINITY; N_PARAMS];
    for r in top {
        for (k, v) in r.theta.to_array().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    Ok(Bounds { lo, hi })
}

/// Shrinks the search box to the spread of the best records, widened to at
/// least `min_width` of the table width per dimension and clipped to the table.
pub fn refine_bounds(records: &[EvalRecord], min_width: f64) -> Result<Bounds, CalibError> {
    let raw = top_box(records)?;
    let table = Bounds::table();
    let mut out = raw.clone();
    for k in 0..N_PARAMS {
        let want = min_width * table.width(k);
        if raw.width(k) < want {
            let c = 0.5 * (raw.lo[k] + raw.hi[k]);
            out.lo[k] = c - 0.5 * want;
            out.hi[k] = c + 0.5 * want;
        }
        out.lo[k] = out.lo[k].max(table.lo[k]);
        out.hi[k] = out.hi[k].min(table.hi[k]);
    }
    Ok(out)
}
