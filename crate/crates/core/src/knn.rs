//! Nearest-neighbor distances on a uniform hash grid.

use std::collections::HashMap;

type Cell = [i64; 3];

struct Grid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    cells: HashMap<Cell, Vec<u32>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        // Seed points usually sample a surface, so size cells from the two
        // largest extents.
        let mut ext: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        ext.sort_by(|a, b| b.total_cmp(a));
        let n = points.len() as f64;
        let mut cell = (ext[0] * ext[1] / n).sqrt();
        if !(cell > 0.0 && cell.is_finite()) {
            cell = ext[0] / n;
        }
        if !(cell > 0.0 && cell.is_finite()) {
            cell = 1.0;
        }
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, p)).or_default().push(i as u32);
        }
        Self { points, cell, cells }
    }

    fn key(cell: f64, p: &[f64; 3]) -> Cell {
        std::array::from_fn(|k| (p[k] / cell).floor() as i64)
    }

    /// Distances from point `i` to its `k` nearest other points, ascending.
    fn nearest(&self, i: usize, k: usize) -> Vec<f64> {
        let p = &self.points[i];
        let c = Self::key(self.cell, p);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let consider = |j: u32, best: &mut Vec<f64>| {
            if j as usize == i {
                return;
            }
            let q = &self.points[j as usize];
            let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
            if best.len() < k || d2 < best[best.len() - 1] {
                let at = best.partition_point(|&b| b <= d2);
                best.insert(at, d2);
                best.truncate(k);
            }
        };
        let mut r: i64 = 0;
        loop {
            let side = (2 * r + 1) as usize;
            if side.pow(3) > self.cells.len() * 8 {
                // The ring would visit mostly empty cells; finish by scanning
                // the remaining occupied ones.
                for (key, members) in &self.cells {
                    if (0..3).any(|a| (key[a] - c[a]).abs() >= r) {
                        for &j in members {
                            consider(j, &mut best);
                        }
                    }
                }
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(members) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &j in members {
                                consider(j, &mut best);
                            }
                        }
                    }
                }
            }
            // Anything outside the visited block is farther than r cells.
            if best.len() == k && best[k - 1].sqrt() <= r as f64 * self.cell {
                break;
            }
            r += 1;
        }
        best.into_iter().map(f64::sqrt).collect()
    }
}

/// Mean distance from each point to its `k` nearest neighbors (fewer when the
/// cloud is small; 0 for a lone point).
pub fn mean_neighbor_distances(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    if points.is_empty() || k == 0 {
        return vec![0.0; points.len()];
    }
    let grid = Grid::new(points);
    let k = k.min(points.len() - 1);
    (0..points.len())
        .map(|i| {
            if k == 0 {
                return 0.0;
            }
            let d = grid.nearest(i, k);
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect()
}
