//! Binary checkpoint layout, all little-endian:
//!
//! ```text
//! "FLIPCKPT" | u32 version | u64 n | n bytes config JSON | u64 FNV-1a of the JSON
//! u32 tensor count | per tensor: u32 ndim, u64 dims.., f64 data..
//! u64 update count | u64 actor, critic, critic, alpha Adam steps
//! 32-byte rng seed | u64 rng stream | u128 rng word position
//! u64 FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::mlp::{Adam, Mlp, ScalarAdam};
use super::{PolicyState, SacConfig, SacError};
use crate::rng::fnv1a;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    put_u32(out, 2);
    put_u64(out, m.nrows() as u64);
    put_u64(out, m.ncols() as u64);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_vector(out: &mut Vec<u8>, v: &Array1<f64>) {
    put_u32(out, 1);
    put_u64(out, v.len() as u64);
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Every network in checkpoint order.
fn networks(p: &PolicyState) -> Vec<&Mlp> {
    let (am, av) = p.actor_opt.moments();
    let (c0m, c0v) = p.critic_opts[0].moments();
    let (c1m, c1v) = p.critic_opts[1].moments();
    vec![&p.actor, &p.critics[0], &p.critics[1], &p.targets[0], &p.targets[1], am, av, c0m, c0v, c1m, c1v]
}

fn encode(p: &PolicyState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let blob = serde_json::to_vec(&p.config).expect("config serializes");
    put_u64(&mut out, blob.len() as u64);
    out.extend_from_slice(&blob);
    put_u64(&mut out, fnv1a(&blob));

    let nets = networks(p);
    let tensors: u32 = nets.iter().map(|n| 2 * n.layers.len() as u32).sum::<u32>() + 1;
    put_u32(&mut out, tensors);
    for n in nets {
        for l in &n.layers {
            put_matrix(&mut out, &l.w);
            put_vector(&mut out, &l.b);
        }
    }
    put_vector(&mut out, &Array1::from(vec![p.log_alpha, p.alpha_opt.m, p.alpha_opt.v]));

    for v in [p.updates, p.actor_opt.t, p.critic_opts[0].t, p.critic_opts[1].t, p.alpha_opt.t] {
        put_u64(&mut out, v);
    }
    out.extend_from_slice(&p.rng.get_seed());
    put_u64(&mut out, p.rng.get_stream());
    out.extend_from_slice(&p.rng.get_word_pos().to_le_bytes());
    let h = fnv1a(&out);
    put_u64(&mut out, h);
    out
}

/// Writes the full learner state, optimizer moments and rng included.
pub fn save_checkpoint(p: &PolicyState, path: &Path) -> Result<(), SacError> {
    fs::write(path, encode(p))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SacError> {
        if self.buf.len() - self.pos < n {
            return Err(SacError::CorruptCheckpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SacError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SacError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SacError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self, want: &[usize], what: &str) -> Result<(), SacError> {
        let nd = self.u32()? as usize;
        let mut got = Vec::with_capacity(nd.min(4));
        for _ in 0..nd.min(4) {
            got.push(self.u64()? as usize);
        }
        if got != want {
            return Err(SacError::ShapeMismatch(format!("{what}: found {got:?}, expected {want:?}")));
        }
        Ok(())
    }

    fn fill(&mut self, net: &mut Mlp, what: &str) -> Result<(), SacError> {
        for (i, l) in net.layers.iter_mut().enumerate() {
            self.dims(&[l.w.nrows(), l.w.ncols()], &format!("{what} layer {i} weights"))?;
            for v in l.w.iter_mut() {
                *v = self.f64()?;
            }
            self.dims(&[l.b.len()], &format!("{what} layer {i} bias"))?;
            for v in l.b.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

/// Reads a checkpoint. With `expected`, a checkpoint whose network widths
/// differ is refused.
pub fn load_checkpoint(path: &Path, expected: Option<&SacConfig>) -> Result<PolicyState, SacError> {
    let buf = fs::read(path)?;
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(SacError::CorruptCheckpoint("bad magic".into()));
    }
    let mut r = Reader { buf: &buf, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(SacError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    if buf.len() < 8 + 12 + 8 {
        return Err(SacError::CorruptCheckpoint("unexpected end of file".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(SacError::CorruptCheckpoint("checksum mismatch".into()));
    }

    let n = r.u64()? as usize;
    let blob = r.take(n)?;
    if fnv1a(blob) != r.u64()? {
        return Err(SacError::CorruptCheckpoint("config hash mismatch".into()));
    }
    let config: SacConfig =
        serde_json::from_slice(blob).map_err(|e| SacError::CorruptCheckpoint(format!("config: {e}")))?;
    if let Some(want) = expected {
        if want.hidden_sizes != config.hidden_sizes {
            return Err(SacError::ShapeMismatch(format!(
                "hidden sizes {:?}, expected {:?}",
                config.hidden_sizes, want.hidden_sizes
            )));
        }
    }

    let mut p = PolicyState::new(config).map_err(|e| SacError::CorruptCheckpoint(e.to_string()))?;
    let mut nets: Vec<Mlp> = networks(&p).into_iter().cloned().collect();
    let tensors = r.u32()? as usize;
    let want: usize = nets.iter().map(|n| 2 * n.layers.len()).sum::<usize>() + 1;
    if tensors != want {
        return Err(SacError::ShapeMismatch(format!("{tensors} tensors, expected {want}")));
    }
    let names = ["actor", "critic 1", "critic 2", "target 1", "target 2"];
    for (i, net) in nets.iter_mut().enumerate() {
        r.fill(net, names.get(i).copied().unwrap_or("optimizer"))?;
    }
    r.dims(&[3], "temperature")?;
    let (log_alpha, am, av) = (r.f64()?, r.f64()?, r.f64()?);

    let updates = r.u64()?;
    let steps = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    if r.pos != body.len() {
        return Err(SacError::CorruptCheckpoint("trailing bytes".into()));
    }

    let mut it = nets.into_iter();
    let mut next = || it.next().unwrap();
    p.actor = next();
    p.critics = [next(), next()];
    p.targets = [next(), next()];
    let lr = p.config.lr;
    p.actor_opt = Adam::from_parts(lr, steps[0], next(), next());
    p.critic_opts = [Adam::from_parts(lr, steps[1], next(), next()), Adam::from_parts(lr, steps[2], next(), next())];
    p.log_alpha = log_alpha;
    p.alpha_opt = ScalarAdam { lr, t: steps[3], m: am, v: av };
    p.updates = updates;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    p.rng = rng;
    Ok(p)
}
