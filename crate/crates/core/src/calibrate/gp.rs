//! Gaussian-process regression with a Matérn 5/2 ARD kernel and expected
//! improvement for minimization.
//!
//! Targets are standardized before fitting; all hyperparameters live in the
//! standardized space and are stored as logarithms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const SQRT5: f64 = 2.236_067_977_499_79;
const MIN_LOG_NOISE: f64 = -13.8; // ~1e-6
const MAX_LOG_NOISE: f64 = 0.0;
const LOG_LEN_RANGE: (f64, f64) = (-4.6, 2.3); // ~0.01 .. 10 on the unit cube
const LOG_SIGNAL_RANGE: (f64, f64) = (-4.6, 2.3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengths: Vec<f64>,
    pub log_signal: f64,
    pub log_noise: f64,
}

impl GpHyper {
    pub fn default_for(dim: usize) -> Self {
        GpHyper {
            log_lengths: vec![(0.3f64).ln(); dim],
            log_signal: 0.0,
            log_noise: (1e-4f64).ln(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengths.clone();
        v.push(self.log_signal);
        v.push(self.log_noise);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        GpHyper {
            log_lengths: v[..d].to_vec(),
            log_signal: v[d],
            log_noise: v[d + 1],
        }
    }

    fn clamp(v: &mut [f64]) {
        let d = v.len() - 2;
        for x in &mut v[..d] {
            *x = x.clamp(LOG_LEN_RANGE.0, LOG_LEN_RANGE.1);
        }
        v[d] = v[d].clamp(LOG_SIGNAL_RANGE.0, LOG_SIGNAL_RANGE.1);
        v[d + 1] = v[d + 1].clamp(MIN_LOG_NOISE, MAX_LOG_NOISE);
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }
}

fn matern52(a: &[f64], b: &[f64], inv_len: &[f64], signal: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(inv_len)
        .map(|((x, y), il)| ((x - y) * il).powi(2))
        .sum();
    let r = r2.sqrt();
    signal * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// A fitted Gaussian process.
#[derive(Clone, Debug)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    inv_len: Vec<f64>,
    signal: f64,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    best_std: f64,
}

fn standardize(y: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    (mean, std, y.iter().map(|v| (v - mean) / std).collect())
}

/// Cholesky of the kernel matrix plus noise, adding jitter if needed.
fn factor(x: &[Vec<f64>], hyper: &GpHyper) -> Option<Cholesky<f64, Dyn>> {
    let n = x.len();
    let inv_len: Vec<f64> = hyper.log_lengths.iter().map(|l| (-l).exp()).collect();
    let signal = hyper.log_signal.exp();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern52(&x[i], &x[j], &inv_len, signal);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let noise = hyper.noise_variance();
    let mut jitter = 0.0;
    for _ in 0..6 {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Some(c);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
    }
    None
}

/// Log marginal likelihood of standardized targets `ys`.
fn log_marginal(x: &[Vec<f64>], ys: &DVector<f64>, hyper: &GpHyper) -> f64 {
    let Some(chol) = factor(x, hyper) else {
        return f64::NEG_INFINITY;
    };
    let alpha = chol.solve(ys);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let n = ys.len() as f64;
    -0.5 * ys.dot(&alpha) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

impl Gp {
    /// Fits with fixed hyperparameters.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyper) -> Option<Gp> {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty());
        let (y_mean, y_std, ys) = standardize(y);
        let ys = DVector::from_vec(ys);
        let chol = factor(&x, &hyper)?;
        let alpha = chol.solve(&ys);
        let best_std = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(Gp {
            inv_len: hyper.log_lengths.iter().map(|l| (-l).exp()).collect(),
            signal: hyper.log_signal.exp(),
            x,
            y_mean,
            y_std,
            hyper,
            l: chol.l(),
            alpha,
            best_std,
        })
    }

    /// Chooses hyperparameters by maximizing the log marginal likelihood with
    /// a random scan followed by a shrinking coordinate search, starting from
    /// `start`.
    pub fn optimize_hyper(x: &[Vec<f64>], y: &[f64], start: &GpHyper, rng: &mut impl Rng) -> GpHyper {
        let (_, _, ys) = standardize(y);
        let ys = DVector::from_vec(ys);
        let dim = start.log_lengths.len();
        let mut best = start.to_vec();
        GpHyper::clamp(&mut best);
        let mut best_val = log_marginal(x, &ys, &GpHyper::from_vec(&best));

        for _ in 0..24 {
            let mut cand = best.clone();
            for (k, c) in cand.iter_mut().enumerate() {
                let (lo, hi) = if k < dim {
                    LOG_LEN_RANGE
                } else if k == dim {
                    LOG_SIGNAL_RANGE
                } else {
                    (MIN_LOG_NOISE, MAX_LOG_NOISE)
                };
                *c = rng.gen_range(lo..hi);
            }
            let v = log_marginal(x, &ys, &GpHyper::from_vec(&cand));
            if v > best_val {
                best_val = v;
                best = cand;
            }
        }

        let mut step = 1.0;
        while step > 0.05 {
            let mut improved = false;
            for k in 0..best.len() {
                for dir in [-1.0, 1.0] {
                    let mut cand = best.clone();
                    cand[k] += dir * step;
                    GpHyper::clamp(&mut cand);
                    let v = log_marginal(x, &ys, &GpHyper::from_vec(&cand));
                    if v > best_val + 1e-9 {
                        best_val = v;
                        best = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        GpHyper::from_vec(&best)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Posterior mean and variance in the original target units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_std(q);
        (self.y_mean + self.y_std * m, v * self.y_std * self.y_std)
    }

    fn predict_std(&self, q: &[f64]) -> (f64, f64) {
        let kq = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52(xi, q, &self.inv_len, self.signal)),
        );
        let mean = kq.dot(&self.alpha);
        let w = self
            .l
            .solve_lower_triangular(&kq)
            .expect("triangular factor is non-singular");
        let var = (self.signal - w.dot(&w)).max(0.0);
        (mean, var)
    }

    /// Expected improvement below the best training target.
    pub fn expected_improvement(&self, q: &[f64]) -> f64 {
        let (mu, var) = self.predict_std(q);
        ei(self.best_std, mu, var.sqrt())
    }
}

/// Expected improvement of a Gaussian `N(mu, sigma^2)` below `best`.
pub fn ei(best: f64, mu: f64, sigma: f64) -> f64 {
    let imp = best - mu;
    if sigma <= 1e-12 {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    let n = Normal::standard();
    (imp * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Maximizes `f` over the unit cube by scoring `n_random` uniform samples plus
/// `seeds`, then refining the best few with a shrinking coordinate search.
pub fn maximize_unit(
    dim: usize,
    f: impl Fn(&[f64]) -> f64,
    seeds: &[Vec<f64>],
    n_random: usize,
    n_local: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n_random + seeds.len());
    for s in seeds {
        let p: Vec<f64> = s.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        scored.push((f(&p), p));
    }
    for _ in 0..n_random {
        let p: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
        scored.push((f(&p), p));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(n_local.max(1));

    let mut best = scored[0].clone();
    for (mut val, mut p) in scored {
        let mut step = 0.1;
        while step > 1e-3 {
            let mut improved = false;
            for k in 0..dim {
                for dir in [-1.0, 1.0] {
                    let mut c = p.clone();
                    c[k] = (c[k] + dir * step).clamp(0.0, 1.0);
                    let v = f(&c);
                    if v > val {
                        val = v;
                        p = c;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if val > best.0 {
            best = (val, p);
        }
    }
    best.1
}

const EI_RANDOM_CANDIDATES: usize = 2000;
const EI_LOCAL_STARTS: usize = 5;

/// Fits a GP with `hyper` and returns the unit-cube maximizer of expected
/// improvement, or `None` when the kernel matrix cannot be factored.
pub fn suggest(
    xs: Vec<Vec<f64>>,
    ys: &[f64],
    hyper: &GpHyper,
    starts: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Option<Vec<f64>> {
    let dim = xs.first()?.len();
    let model = Gp::fit(xs, ys, hyper.clone())?;
    Some(maximize_unit(
        dim,
        |q| model.expected_improvement(q),
        starts,
        EI_RANDOM_CANDIDATES,
        EI_LOCAL_STARTS,
        rng,
    ))
}
