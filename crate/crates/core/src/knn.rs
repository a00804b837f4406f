//! Nearest-neighbor distances on a uniform hash grid.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

type Cell = (i64, i64, i64);

const BRUTE_FORCE_BELOW: usize = 64;

fn brute_force(points: &[Vector3<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, q)| (q - points[i]).norm())
        .collect();
    d.sort_by(f64::total_cmp);
    d[..k].iter().sum::<f64>() / k as f64
}

/// For every point, the mean distance to its `k` nearest other points.
/// Points with no neighbors get `fallback`.
pub fn mean_neighbor_distance(points: &[Vector3<f64>], k: usize, fallback: f64) -> Vec<f64> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![fallback; n];
    }
    let k = k.min(n - 1);
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    if n <= BRUTE_FORCE_BELOW {
        return (0..n).map(|i| brute_force(points, i, k)).collect();
    }
    // Aim for a handful of points per cell. Flat axes are widened so that
    // planar or collinear clouds do not produce a needle-thin grid.
    let floor = (extent.max() * 1e-2).max(1e-9);
    let volume = extent.iter().map(|e| e.max(floor)).product::<f64>();
    let mut cell = (volume * 4.0 / n as f64).cbrt();
    if !(cell.is_finite() && cell > 0.0) {
        cell = extent.max().max(1e-9);
    }
    let key = |p: &Vector3<f64>| -> Cell {
        (
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let span = (extent.max() / cell).ceil() as i64 + 1;

    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dz in -ring..=ring {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(list) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                                continue;
                            };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm();
                                if best.len() < k || d < best[k - 1] {
                                    let pos = best.partition_point(|b| *b <= d);
                                    best.insert(pos, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // Every point outside the searched rings is at least
                // `ring * cell` away.
                if (best.len() == k && best[k - 1] <= ring as f64 * cell) || ring > span {
                    break;
                }
                ring += 1;
            }
            best.iter().sum::<f64>() / best.len() as f64
        })
        .collect()
}
