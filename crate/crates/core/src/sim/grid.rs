//! Uniform spatial hash over particle centres.
//!
//! Cells are cubes of side `cell_size`; cell coordinates are hashed into a
//! table whose size is a power of two at least twice the particle count.
//! Entries are stored contiguously per bucket (counting sort), so building is
//! O(n) and deterministic. Bucket collisions are filtered by comparing the
//! stored cell coordinates.

use nalgebra::Vector3;

#[derive(Clone, Debug, Default)]
pub struct SpatialHash {
    cell_size: f64,
    inv_cell: f64,
    mask: usize,
    cells: Vec<[i32; 3]>,
    bucket_start: Vec<u32>,
    entries: Vec<u32>,
}

fn hash_cell(c: [i32; 3]) -> usize {
    let h = (c[0] as i64).wrapping_mul(92_837_111)
        ^ (c[1] as i64).wrapping_mul(689_287_499)
        ^ (c[2] as i64).wrapping_mul(283_923_481);
    h as u64 as usize
}

impl SpatialHash {
    pub fn new(cell_size: f64) -> Self {
        SpatialHash {
            cell_size,
            inv_cell: 1.0 / cell_size,
            ..Default::default()
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_of(&self, p: &Vector3<f64>) -> [i32; 3] {
        [
            (p.x * self.inv_cell).floor() as i32,
            (p.y * self.inv_cell).floor() as i32,
            (p.z * self.inv_cell).floor() as i32,
        ]
    }

    /// Rebuilds the table from the particles selected by `include`.
    pub fn rebuild(&mut self, positions: &[Vector3<f64>], include: impl Fn(usize) -> bool) {
        let n = positions.len();
        let table = (2 * n).next_power_of_two().max(16);
        self.mask = table - 1;
        self.cells.clear();
        self.cells.extend(positions.iter().map(|p| [
            (p.x * self.inv_cell).floor() as i32,
            (p.y * self.inv_cell).floor() as i32,
            (p.z * self.inv_cell).floor() as i32,
        ]));
        self.bucket_start.clear();
        self.bucket_start.resize(table + 1, 0);
        for i in 0..n {
            if include(i) {
                self.bucket_start[(hash_cell(self.cells[i]) & self.mask) + 1] += 1;
            }
        }
        for b in 0..table {
            self.bucket_start[b + 1] += self.bucket_start[b];
        }
        let total = self.bucket_start[table] as usize;
        self.entries.clear();
        self.entries.resize(total, 0);
        let mut cursor: Vec<u32> = self.bucket_start[..table].to_vec();
        for i in 0..n {
            if include(i) {
                let b = hash_cell(self.cells[i]) & self.mask;
                self.entries[cursor[b] as usize] = i as u32;
                cursor[b] += 1;
            }
        }
    }

    /// Calls `f(j)` for every indexed particle whose cell is within one cell
    /// of particle `i`'s cell. Order is deterministic.
    pub fn for_each_candidate(&self, i: usize, mut f: impl FnMut(usize)) {
        let c = self.cells[i];
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                    let b = hash_cell(q) & self.mask;
                    let (s, e) = (self.bucket_start[b] as usize, self.bucket_start[b + 1] as usize);
                    for &j in &self.entries[s..e] {
                        let j = j as usize;
                        if self.cells[j] == q {
                            f(j);
                        }
                    }
                }
            }
        }
    }

    /// Collects unordered pairs `(i, j)`, `i < j`, closer than `radius`.
    /// `radius` must not exceed the cell size.
    pub fn pairs_within(
        &self,
        positions: &[Vector3<f64>],
        radius: f64,
        active: impl Fn(usize) -> bool,
        out: &mut Vec<(u32, u32)>,
    ) {
        debug_assert!(radius <= self.cell_size * (1.0 + 1e-12));
        out.clear();
        let r2 = radius * radius;
        for i in 0..positions.len() {
            if !active(i) {
                continue;
            }
            let pi = positions[i];
            let c = self.cells[i];
            // Own cell plus the 13 neighbours that come after it, so each
            // unordered pair of cells is visited once.
            for (k, off) in HALF_STENCIL.iter().enumerate() {
                let q = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                let b = hash_cell(q) & self.mask;
                let (s, e) = (self.bucket_start[b] as usize, self.bucket_start[b + 1] as usize);
                for &j in &self.entries[s..e] {
                    let j = j as usize;
                    if self.cells[j] != q || (k == 0 && j <= i) {
                        continue;
                    }
                    if (positions[j] - pi).norm_squared() < r2 {
                        out.push((i.min(j) as u32, i.max(j) as u32));
                    }
                }
            }
        }
    }
}

const HALF_STENCIL: [[i32; 3]; 14] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 1, 0],
    [0, 1, 0],
    [1, 1, 0],
    [-1, -1, 1],
    [0, -1, 1],
    [1, -1, 1],
    [-1, 0, 1],
    [0, 0, 1],
    [1, 0, 1],
    [-1, 1, 1],
    [0, 1, 1],
    [1, 1, 1],
];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.05)))
            .collect();
        let r = 0.015;
        let mut grid = SpatialHash::new(r);
        grid.rebuild(&pts, |_| true);
        let mut got = Vec::new();
        grid.pairs_within(&pts, r, |_| true, &mut got);
        got.sort_unstable();
        let mut want = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if (pts[i] - pts[j]).norm_squared() < r * r {
                    want.push((i as u32, j as u32));
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn excluded_particles_are_invisible() {
        let pts = vec![Vector3::zeros(), Vector3::new(0.001, 0.0, 0.0)];
        let mut grid = SpatialHash::new(0.01);
        grid.rebuild(&pts, |i| i == 0);
        let mut got = Vec::new();
        grid.pairs_within(&pts, 0.01, |_| true, &mut got);
        assert!(got.is_empty());
    }
}
