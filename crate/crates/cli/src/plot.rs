//! Training curves: total reward and final error per episode, averaged over
//! every seed found under a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use flip_core::trainer::EpisodeLog;
use plotters::prelude::*;

use crate::error::CliError;

/// `train/log.csv` of the run itself, else of each immediate subdirectory.
pub fn find_logs(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let own = run_dir.join("train").join("log.csv");
    if own.exists() {
        return Ok(vec![own]);
    }
    let mut logs = Vec::new();
    if let Ok(entries) = fs::read_dir(run_dir) {
        for e in entries.flatten() {
            let p = e.path().join("train").join("log.csv");
            if p.exists() {
                logs.push(p);
            }
        }
    }
    logs.sort();
    if logs.is_empty() {
        return Err(CliError::validation(format!("no train/log.csv under {}", run_dir.display())));
    }
    Ok(logs)
}

fn read_log(path: &Path) -> Result<Vec<EpisodeLog>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<EpisodeLog>, _>>()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(rows)
}

/// Trailing moving average over `w` points.
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        sum += x;
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Per-episode mean, min and max across seeds, over the common length.
#[derive(Debug, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn band(series: &[Vec<f64>]) -> Band {
    let n = series.iter().map(Vec::len).min().unwrap_or(0);
    let mut b = Band { mean: Vec::with_capacity(n), min: Vec::with_capacity(n), max: Vec::with_capacity(n) };
    for i in 0..n {
        let col = series.iter().map(|s| s[i]);
        b.mean.push(col.clone().sum::<f64>() / series.len() as f64);
        b.min.push(col.clone().fold(f64::INFINITY, f64::min));
        b.max.push(col.fold(f64::NEG_INFINITY, f64::max));
    }
    b
}

fn draw(path: &Path, title: &str, y_desc: &str, b: &Band, with_band: bool) -> Result<(), CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::runtime(format!("plot {}: {e}", path.display()));
    let n = b.mean.len();
    let lo = b.min.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0..(n.max(2)) as f64, (lo - pad)..(hi + pad))
        .map_err(|e| err(&e))?;
    chart.configure_mesh().x_desc("episode").y_desc(y_desc).draw().map_err(|e| err(&e))?;
    let x = |i: usize| (i + 1) as f64;
    if with_band {
        let mut poly: Vec<(f64, f64)> = (0..n).map(|i| (x(i), b.max[i])).collect();
        poly.extend((0..n).rev().map(|i| (x(i), b.min[i])));
        chart.draw_series(std::iter::once(Polygon::new(poly, BLUE.mix(0.2)))).map_err(|e| err(&e))?;
    }
    chart
        .draw_series(LineSeries::new((0..n).map(|i| (x(i), b.mean[i])), &BLUE))
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Writes `plots/curves.csv`, `plots/reward.svg` and `plots/final_error.svg`.
pub fn plot_run(run_dir: &Path, window: usize) -> Result<(), CliError> {
    let logs = find_logs(run_dir)?;
    let mut rewards = Vec::new();
    let mut errors = Vec::new();
    for p in &logs {
        let rows = read_log(p)?;
        if rows.is_empty() {
            return Err(CliError::validation(format!("{} has no episodes", p.display())));
        }
        rewards.push(smooth(&rows.iter().map(|r| r.total_reward).collect::<Vec<_>>(), window));
        errors.push(smooth(&rows.iter().map(|r| r.final_error_mg).collect::<Vec<_>>(), window));
    }
    let (r, e) = (band(&rewards), band(&errors));

    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    w.write_record(["episode", "reward_mean", "reward_min", "reward_max", "error_mean", "error_min", "error_max"])?;
    for i in 0..r.mean.len() {
        w.write_record(
            [(i + 1) as f64, r.mean[i], r.min[i], r.max[i], e.mean[i], e.min[i], e.max[i]].map(|v| v.to_string()),
        )?;
    }
    w.flush()?;

    let multi = logs.len() > 1;
    let seeds = if multi { format!(" ({} seeds)", logs.len()) } else { String::new() };
    draw(&dir.join("reward.svg"), &format!("Total reward{seeds}"), "total reward", &r, multi)?;
    draw(&dir.join("final_error.svg"), &format!("Final error{seeds}"), "final error (mg)", &e, multi)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[2.0, 4.0], 1), vec![2.0, 4.0]);
    }

    #[test]
    fn band_over_common_length() {
        let b = band(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0]]);
        assert_eq!(b, Band { mean: vec![2.0, 1.0], min: vec![1.0, 0.0], max: vec![3.0, 2.0] });
    }
}
