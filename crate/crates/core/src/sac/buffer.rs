use rand::Rng;

use super::{SacError, ACT_DIM, OBS_DIM};

/// One `(s, a, r, s', d)` tuple with normalized observations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACT_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { data: Vec::with_capacity(capacity.min(1 << 16)), capacity, cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Transition>, SacError> {
        if self.data.len() < n {
            return Err(SacError::BufferUnderfilled { size: self.data.len(), needed: n });
        }
        Ok((0..n).map(|_| self.data[rng.gen_range(0..self.data.len())]).collect())
    }
}
