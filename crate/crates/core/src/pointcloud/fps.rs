use rand::Rng;

use super::{squared_distance, PointCloud};
use crate::error::{Error, Result};

/// Greedy max-min subset selection. The first pick is `start`; each later pick
/// maximizes the (squared) distance to the selected set, ties going to the
/// lowest index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("cannot sample {k} of {n} points")));
    }
    if start >= n {
        return Err(Error::arg(format!("start index {start} out of range for {n} points")));
    }
    let pts = pc.points();
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        picked.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = squared_distance(pts[i], c);
            if d < dist[i] {
                dist[i] = d;
            }
            if !taken[i] && dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Same as [`farthest_point_sample`] with a random start point.
pub fn farthest_point_sample_seeded(pc: &PointCloud, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let start = rng.random_range(0..pc.len());
    farthest_point_sample(pc, k, start)
}
