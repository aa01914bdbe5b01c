//! Soft actor-critic for the weighing task: a tanh-squashed Gaussian policy,
//! twin critics with Polyak-averaged targets and a learned temperature.

mod buffer;
mod checkpoint;
pub mod mlp;

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use buffer::{ReplayBuffer, Transition};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use mlp::{Adam, Mlp, ScalarAdam};

pub const OBS_DIM: usize = 3;
pub const ACT_DIM: usize = 2;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Largest action magnitude handed out, so actions stay strictly inside (-1, 1).
const ACTION_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("replay buffer holds {size} transitions, {needed} needed")]
    BufferUnderfilled { size: usize, needed: usize },
    #[error("batch has {got} transitions, expected {expected}")]
    BatchSize { got: usize, expected: usize },
    #[error("action component {0} outside (-1, 1)")]
    Domain(f64),
    #[error("checkpoint schema version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden_sizes: Vec<usize>,
    pub target_entropy: f64,
    pub updates_per_step: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            hidden_sizes: vec![256, 256],
            target_entropy: -(ACT_DIM as f64),
            updates_per_step: 1,
            warmup_steps: 1000,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad("batch_size must be in 1..=buffer_capacity");
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be non-empty and positive");
        }
        if !self.target_entropy.is_finite() {
            return bad("target_entropy must be finite");
        }
        if self.updates_per_step == 0 {
            return bad("updates_per_step must be at least 1");
        }
        Ok(())
    }

    fn actor_sizes(&self) -> Vec<usize> {
        let mut v = vec![OBS_DIM];
        v.extend(&self.hidden_sizes);
        v.push(2 * ACT_DIM);
        v
    }

    fn critic_sizes(&self) -> Vec<usize> {
        let mut v = vec![OBS_DIM + ACT_DIM];
        v.extend(&self.hidden_sizes);
        v.push(1);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
}

/// Column-stacked view of a batch of transitions.
pub struct Batch {
    pub obs: Array2<f64>,
    pub action: Array2<f64>,
    pub reward: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn new(ts: &[Transition]) -> Self {
        let n = ts.len();
        Batch {
            obs: Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].obs[j]),
            action: Array2::from_shape_fn((n, ACT_DIM), |(i, j)| ts[i].action[j]),
            reward: Array1::from_shape_fn(n, |i| ts[i].reward),
            next_obs: Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].next_obs[j]),
            done: Array1::from_shape_fn(n, |i| if ts[i].done { 1.0 } else { 0.0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_sech2(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn gaussian_log_norm() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Reparameterized policy sample for a batch.
struct PolicySample {
    trace: mlp::Trace,
    /// Pre-squash values.
    u: Array2<f64>,
    action: Array2<f64>,
    sigma: Array2<f64>,
    /// Whether each log-std hit its clamp, which zeroes its gradient.
    clamped: Array2<bool>,
    logp: Array1<f64>,
}

fn concat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

/// Actor, twin critics, their targets, the temperature and every optimizer
/// moment.
#[derive(Clone, Debug)]
pub struct PolicyState {
    pub config: SacConfig,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub log_alpha: f64,
    pub(crate) actor_opt: Adam,
    pub(crate) critic_opts: [Adam; 2],
    pub(crate) alpha_opt: ScalarAdam,
    /// Gradient updates applied so far.
    pub updates: u64,
    pub(crate) rng: ChaCha8Rng,
}

impl PolicyState {
    pub fn new(config: SacConfig) -> Result<Self, SacError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor = Mlp::new(&config.actor_sizes(), &mut rng);
        let critics = [Mlp::new(&config.critic_sizes(), &mut rng), Mlp::new(&config.critic_sizes(), &mut rng)];
        Ok(PolicyState {
            actor_opt: Adam::new(&actor, config.lr),
            critic_opts: [Adam::new(&critics[0], config.lr), Adam::new(&critics[1], config.lr)],
            alpha_opt: ScalarAdam::new(config.lr),
            targets: critics.clone(),
            actor,
            critics,
            log_alpha: 0.0,
            updates: 0,
            rng,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Mean and clamped log-std of the Gaussian head.
    fn head(&self, obs: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<bool>, mlp::Trace) {
        let (out, trace) = self.actor.forward_trace(obs);
        let mu = out.slice(s![.., ..ACT_DIM]).to_owned();
        let raw = out.slice(s![.., ACT_DIM..]);
        let clamped = raw.mapv(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        let ls = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mu, ls, clamped, trace)
    }

    fn sample_policy(&self, obs: &Array2<f64>, eps: &Array2<f64>) -> PolicySample {
        let (mu, ls, clamped, trace) = self.head(obs);
        let sigma = ls.mapv(f64::exp);
        let u = &mu + &(&sigma * eps);
        let action = u.mapv(f64::tanh);
        let c = gaussian_log_norm();
        let mut logp = Array1::zeros(obs.nrows());
        for i in 0..obs.nrows() {
            logp[i] = (0..ACT_DIM).map(|j| -0.5 * eps[[i, j]].powi(2) - ls[[i, j]] - c - log_sech2(u[[i, j]])).sum();
        }
        PolicySample { trace, u, action, sigma, clamped, logp }
    }

    /// Deterministic mode returns `tanh(mean)`; otherwise a squashed Gaussian draw.
    pub fn act(&self, obs: &[f64; OBS_DIM], deterministic: bool, rng: &mut impl Rng) -> [f64; ACT_DIM] {
        let x = Array2::from_shape_fn((1, OBS_DIM), |(_, j)| obs[j]);
        let (mu, ls, _, _) = self.head(&x);
        let mut a = [0.0; ACT_DIM];
        for j in 0..ACT_DIM {
            let u = if deterministic {
                mu[[0, j]]
            } else {
                let e: f64 = rng.sample(StandardNormal);
                mu[[0, j]] + ls[[0, j]].exp() * e
            };
            a[j] = u.tanh().clamp(-ACTION_LIMIT, ACTION_LIMIT);
        }
        a
    }

    /// Log-density of a squashed action.
    pub fn log_prob(&self, obs: &[f64; OBS_DIM], action: &[f64; ACT_DIM]) -> Result<f64, SacError> {
        if let Some(&bad) = action.iter().find(|a| !(a.abs() < 1.0)) {
            return Err(SacError::Domain(bad));
        }
        let x = Array2::from_shape_fn((1, OBS_DIM), |(_, j)| obs[j]);
        let (mu, ls, _, _) = self.head(&x);
        let mut lp = 0.0;
        for j in 0..ACT_DIM {
            let a = action[j];
            let u = a.atanh();
            let z = (u - mu[[0, j]]) / ls[[0, j]].exp();
            lp += -0.5 * z * z - ls[[0, j]] - gaussian_log_norm() - (1.0 - a * a).ln();
        }
        Ok(lp)
    }

    /// `n x ACT_DIM` standard normal draws from the learner's own stream.
    fn noise(&mut self, n: usize) -> Array2<f64> {
        let rng = &mut self.rng;
        Array2::from_shape_simple_fn((n, ACT_DIM), || rng.sample(StandardNormal))
    }

    /// Bellman targets `r + gamma (1 - d) (min Q'(s', a') - alpha log pi(a'|s'))`
    /// with `a'` built from `eps_next`.
    pub fn critic_targets(&self, b: &Batch, eps_next: &Array2<f64>) -> Array1<f64> {
        let next = self.sample_policy(&b.next_obs, eps_next);
        let x = concat(&b.next_obs, &next.action);
        let q1 = self.targets[0].forward(&x);
        let q2 = self.targets[1].forward(&x);
        let alpha = self.alpha();
        Array1::from_shape_fn(b.len(), |i| {
            let soft = q1[[i, 0]].min(q2[[i, 0]]) - alpha * next.logp[i];
            b.reward[i] + self.config.gamma * (1.0 - b.done[i]) * soft
        })
    }

    /// Sum over both critics of the mean squared Bellman residual, with
    /// gradients for each critic.
    pub fn critic_loss(&self, b: &Batch, eps_next: &Array2<f64>) -> (f64, [Mlp; 2]) {
        let y = self.critic_targets(b, eps_next);
        let x = concat(&b.obs, &b.action);
        let n = b.len() as f64;
        let mut loss = 0.0;
        let grads = [0, 1].map(|k| {
            let (q, tr) = self.critics[k].forward_trace(&x);
            let r = &q.column(0) - &y;
            loss += r.mapv(|v| v * v).sum() / n;
            let g = r.mapv(|v| 2.0 * v / n).insert_axis(Axis(1));
            self.critics[k].backward(&tr, g).0
        });
        (loss, grads)
    }

    /// `mean(alpha log pi(a|s) - min Q(s, a))` over reparameterized actions,
    /// its gradient for the actor and the per-sample log-probabilities.
    pub fn actor_loss(&self, obs: &Array2<f64>, eps: &Array2<f64>) -> (f64, Mlp, Array1<f64>) {
        let n = obs.nrows();
        let nf = n as f64;
        let alpha = self.alpha();
        let p = self.sample_policy(obs, eps);
        let x = concat(obs, &p.action);
        let (q1, t1) = self.critics[0].forward_trace(&x);
        let (q2, t2) = self.critics[1].forward_trace(&x);

        let mut loss = 0.0;
        let mut g1 = Array2::zeros((n, 1));
        let mut g2 = Array2::zeros((n, 1));
        for i in 0..n {
            let (qa, qb) = (q1[[i, 0]], q2[[i, 0]]);
            loss += (alpha * p.logp[i] - qa.min(qb)) / nf;
            if qa <= qb {
                g1[[i, 0]] = -1.0 / nf;
            } else {
                g2[[i, 0]] = -1.0 / nf;
            }
        }
        let dq_a = {
            let d1 = self.critics[0].backward(&t1, g1).1;
            let d2 = self.critics[1].backward(&t2, g2).1;
            (&d1 + &d2).slice(s![.., OBS_DIM..]).to_owned()
        };

        // d logp / d mu = 2 tanh(u); d logp / d logstd = -1 + 2 tanh(u) sigma eps
        let mut g_out = Array2::zeros((n, 2 * ACT_DIM));
        for i in 0..n {
            for j in 0..ACT_DIM {
                let u = p.u[[i, j]];
                let th = p.action[[i, j]];
                let g_u = dq_a[[i, j]] * log_sech2(u).exp() + alpha / nf * 2.0 * th;
                g_out[[i, j]] = g_u;
                g_out[[i, ACT_DIM + j]] =
                    if p.clamped[[i, j]] { 0.0 } else { g_u * p.sigma[[i, j]] * eps[[i, j]] - alpha / nf };
            }
        }
        let grad = self.actor.backward(&p.trace, g_out).0;
        (loss, grad, p.logp)
    }

    /// `-log_alpha * mean(log pi + target_entropy)` and its derivative in `log_alpha`.
    pub fn alpha_loss(&self, logp: &Array1<f64>) -> (f64, f64) {
        let m = logp.mean().unwrap_or(0.0) + self.config.target_entropy;
        (-self.log_alpha * m, -m)
    }

    /// One gradient step on critics, actor and temperature, then the target update.
    pub fn update(&mut self, batch: &[Transition]) -> Result<Losses, SacError> {
        if batch.len() != self.config.batch_size {
            return Err(SacError::BatchSize { got: batch.len(), expected: self.config.batch_size });
        }
        let b = Batch::new(batch);
        let eps_next = self.noise(b.len());
        let eps = self.noise(b.len());

        let (critic, gc) = self.critic_loss(&b, &eps_next);
        for (k, g) in gc.iter().enumerate() {
            self.critic_opts[k].step(&mut self.critics[k], g);
        }
        let (actor, ga, logp) = self.actor_loss(&b.obs, &eps);
        self.actor_opt.step(&mut self.actor, &ga);
        let (alpha, g_alpha) = self.alpha_loss(&logp);
        self.alpha_opt.step(&mut self.log_alpha, g_alpha);

        let tau = self.config.tau;
        for k in 0..2 {
            self.targets[k].polyak(&self.critics[k], tau);
        }
        self.updates += 1;
        Ok(Losses { critic, actor, alpha })
    }

    /// Samples from `buffer` with the learner's stream and applies `update`.
    pub fn update_from(&mut self, buffer: &ReplayBuffer) -> Result<Losses, SacError> {
        let batch = buffer.sample(self.config.batch_size, &mut self.rng)?;
        self.update(&batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PolicyState {
        PolicyState::new(SacConfig {
            hidden_sizes: vec![8, 8],
            batch_size: 4,
            buffer_capacity: 64,
            gamma: 0.9,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn batch(rng: &mut impl Rng, n: usize, done: bool) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                obs: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                action: [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)],
                reward: rng.gen_range(-1.0..1.0),
                next_obs: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                done,
            })
            .collect()
    }

    fn zero_actor(p: &mut PolicyState) {
        for l in &mut p.actor.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    #[test]
    fn zero_network_acts_at_the_origin() {
        let mut p = small(0);
        zero_actor(&mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.act(&[0.3, 0.5, 0.1], true, &mut rng), [0.0, 0.0]);
    }

    #[test]
    fn stochastic_pre_squash_mean_matches_head() {
        // zero weights, bias sets mean (0.3, -0.2) and log-std (ln 0.5, ln 0.5)
        let mut p = small(0);
        zero_actor(&mut p);
        let b = &mut p.actor.layers.last_mut().unwrap().b;
        b[0] = 0.3;
        b[1] = -0.2;
        b[2] = 0.5f64.ln();
        b[3] = 0.5f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let a = p.act(&[0.0; 3], false, &mut rng);
            for j in 0..2 {
                assert!(a[j].abs() < 1.0);
                sum[j] += a[j].atanh();
            }
        }
        let se = 0.5 / (n as f64).sqrt();
        assert!((sum[0] / n as f64 - 0.3).abs() < 3.0 * se);
        assert!((sum[1] / n as f64 + 0.2).abs() < 3.0 * se);
    }

    #[test]
    fn same_stream_same_sample() {
        let p = small(2);
        let a = p.act(&[0.1, 0.2, 0.3], false, &mut ChaCha8Rng::seed_from_u64(7));
        let b = p.act(&[0.1, 0.2, 0.3], false, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_at_origin_is_closed_form() {
        let mut p = small(0);
        zero_actor(&mut p);
        // standard normal head, tanh(0) = 0, no squash correction
        let expect = -(2.0 * PI).ln();
        assert!((p.log_prob(&[0.0; 3], &[0.0, 0.0]).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let mut p = small(0);
        zero_actor(&mut p);
        let b = &mut p.actor.layers.last_mut().unwrap().b;
        b[0] = 0.4;
        b[2] = 0.3f64.ln();
        // the second coordinate is a standard normal through tanh; fix it at 0,
        // whose marginal density is 1/sqrt(2 pi)
        let m1 = -0.5 * (2.0 * PI).ln();
        let n = 200_000;
        let h = 2.0 / n as f64;
        let mut total = 0.0;
        for k in 0..n {
            let a = -1.0 + (k as f64 + 0.5) * h;
            total += (p.log_prob(&[0.0; 3], &[a, 0.0]).unwrap() - m1).exp() * h;
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn log_prob_rejects_the_boundary() {
        let p = small(0);
        assert!(matches!(p.log_prob(&[0.0; 3], &[1.0, 0.0]), Err(SacError::Domain(_))));
        assert!(matches!(p.log_prob(&[0.0; 3], &[0.0, -1.0]), Err(SacError::Domain(_))));
    }

    #[test]
    fn terminal_targets_are_rewards() {
        let p = small(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = batch(&mut rng, 2, true);
        let b = Batch::new(&ts);
        let eps = Array2::from_elem((2, 2), 0.3);
        let y = p.critic_targets(&b, &eps);
        assert_eq!(y[0], ts[0].reward);
        assert_eq!(y[1], ts[1].reward);

        // hand computation of the loss
        let mut expect = 0.0;
        for c in &p.critics {
            for t in &ts {
                let x = Array2::from_shape_vec((1, 5), vec![t.obs[0], t.obs[1], t.obs[2], t.action[0], t.action[1]])
                    .unwrap();
                expect += (c.forward(&x)[[0, 0]] - t.reward).powi(2) / 2.0;
            }
        }
        assert!((p.critic_loss(&b, &eps).0 - expect).abs() < 1e-6);
    }

    #[test]
    fn zero_discount_targets_are_rewards() {
        let mut p = small(4);
        p.config.gamma = 0.0;
        let ts = batch(&mut ChaCha8Rng::seed_from_u64(4), 4, false);
        let y = p.critic_targets(&Batch::new(&ts), &Array2::from_elem((4, 2), -0.7));
        for (yi, t) in y.iter().zip(&ts) {
            assert_eq!(*yi, t.reward);
        }
    }

    fn rel_close(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-8
    }

    #[test]
    fn critic_gradient_matches_central_differences() {
        let p = small(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Batch::new(&batch(&mut rng, 4, false));
        let eps = Array2::from_shape_simple_fn((4, 2), || rng.sample(StandardNormal));
        let (_, g) = p.critic_loss(&b, &eps);
        let h = 1e-5;
        for k in 0..2 {
            for i in 0..p.critics[k].param_count() {
                let mut a = p.clone();
                *a.critics[k].param_mut(i) += h;
                let mut c = p.clone();
                *c.critics[k].param_mut(i) -= h;
                let fd = (a.critic_loss(&b, &eps).0 - c.critic_loss(&b, &eps).0) / (2.0 * h);
                assert!(rel_close(fd, g[k].param(i)), "critic {k} param {i}: {fd} vs {}", g[k].param(i));
            }
        }
    }

    #[test]
    fn actor_gradient_matches_central_differences() {
        let mut p = small(6);
        p.log_alpha = 0.4f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Batch::new(&batch(&mut rng, 4, false));
        let eps = Array2::from_shape_simple_fn((4, 2), || rng.sample(StandardNormal));
        let (_, g, _) = p.actor_loss(&b.obs, &eps);
        let h = 1e-5;
        for i in 0..p.actor.param_count() {
            let mut a = p.clone();
            *a.actor.param_mut(i) += h;
            let mut c = p.clone();
            *c.actor.param_mut(i) -= h;
            let fd = (a.actor_loss(&b.obs, &eps).0 - c.actor_loss(&b.obs, &eps).0) / (2.0 * h);
            assert!(rel_close(fd, g.param(i)), "actor param {i}: {fd} vs {}", g.param(i));
        }
    }

    #[test]
    fn temperature_gradient_matches_central_differences() {
        let mut p = small(7);
        p.log_alpha = -0.3;
        let logp = Array1::from(vec![0.5, -1.2, 2.0, 0.1]);
        let (_, g) = p.alpha_loss(&logp);
        let h = 1e-5;
        let mut a = p.clone();
        a.log_alpha += h;
        let mut c = p.clone();
        c.log_alpha -= h;
        let fd = (a.alpha_loss(&logp).0 - c.alpha_loss(&logp).0) / (2.0 * h);
        assert!(rel_close(fd, g));
    }

    #[test]
    fn temperature_moves_toward_target_entropy() {
        let p = small(8);
        // near-deterministic policy: high log-density, alpha should grow
        let sharp = Array1::from_elem(4, 5.0);
        assert!(p.alpha_loss(&sharp).1 < 0.0);
        // spread-out policy: log-density below the -2 target, alpha should shrink
        let wide = Array1::from_elem(4, -4.0);
        assert!(p.alpha_loss(&wide).1 > 0.0);

        let mut q = small(8);
        zero_actor(&mut q);
        q.actor.layers.last_mut().unwrap().b[2] = -6.0;
        q.actor.layers.last_mut().unwrap().b[3] = -6.0;
        let ts = batch(&mut ChaCha8Rng::seed_from_u64(8), 4, false);
        let before = q.log_alpha;
        q.update(&ts).unwrap();
        assert!(q.log_alpha > before);
    }

    #[test]
    fn targets_follow_the_ema_recurrence() {
        let mut p = small(9);
        let mut expect = p.targets.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let ts = batch(&mut rng, 4, false);
            p.update(&ts).unwrap();
            for k in 0..2 {
                for (e, c) in expect[k].layers.iter_mut().zip(&p.critics[k].layers) {
                    e.w.zip_mut_with(&c.w, |t, &s| *t = (1.0 - p.config.tau) * *t + p.config.tau * s);
                    e.b.zip_mut_with(&c.b, |t, &s| *t = (1.0 - p.config.tau) * *t + p.config.tau * s);
                }
            }
        }
        assert_eq!(p.targets, expect);
    }

    #[test]
    fn wrong_batch_size_and_underfilled_buffer() {
        let mut p = small(10);
        let ts = batch(&mut ChaCha8Rng::seed_from_u64(10), 3, false);
        assert!(matches!(p.update(&ts), Err(SacError::BatchSize { got: 3, expected: 4 })));
        let mut buf = ReplayBuffer::new(8);
        for t in ts {
            buf.push(t);
        }
        assert!(matches!(p.update_from(&buf), Err(SacError::BufferUnderfilled { .. })));
    }

    #[test]
    fn learns_a_one_step_bandit() {
        // reward peaks at action (0.5, -0.5); terminal after one step
        let mut p = PolicyState::new(SacConfig {
            hidden_sizes: vec![32, 32],
            batch_size: 64,
            buffer_capacity: 4096,
            lr: 3e-3,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let mut buf = ReplayBuffer::new(4096);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let obs = [0.2, 0.5, 0.0];
        for it in 0..1500 {
            let a = if it < 200 { [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)] } else { p.act(&obs, false, &mut rng) };
            let r = -((a[0] - 0.5).powi(2) + (a[1] + 0.5).powi(2));
            buf.push(Transition { obs, action: a, reward: r, next_obs: obs, done: true });
            if buf.len() >= 64 {
                p.update_from(&buf).unwrap();
            }
        }
        let a = p.act(&obs, true, &mut rng);
        assert!((a[0] - 0.5).abs() < 0.15 && (a[1] + 0.5).abs() < 0.15, "{a:?}");
    }
}
