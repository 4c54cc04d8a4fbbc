use crate::error::{Error, Result};

/// Minimum-cost assignment of every column (ground-truth object) to a distinct
/// row (query). `cost` is `q × g` with `q ≥ g`. Returns `assignment[j] = row`
/// for each column `j`.
///
/// Shortest augmenting path formulation of the Hungarian algorithm, O(g²·q).
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let q = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(Error::arg("cost matrix rows differ in length"));
    }
    if q < g {
        return Err(Error::arg(format!("cannot match {g} objects to {q} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::arg("cost matrix contains non-finite entries"));
    }
    if g == 0 {
        return Ok(vec![]);
    }

    // Objects are the "workers" (1-based, n = g) and queries the "jobs" (m = q).
    let (n, m) = (g, q);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; g];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(j, &r)| cost[r][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_diagonal_is_identity() {
        let cost = vec![vec![0.0, 5.0, 5.0], vec![5.0, 0.0, 5.0], vec![5.0, 5.0, 0.0]];
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(assignment_cost(&cost, &a), 0.0);
    }

    #[test]
    fn two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&cost, &a), 2.0);
    }

    #[test]
    fn rectangular_prefers_cheapest_rows() {
        let cost = vec![vec![9.0], vec![3.0], vec![4.0]];
        assert_eq!(hungarian_match(&cost).unwrap(), vec![1]);
    }

    #[test]
    fn fewer_queries_than_objects_is_rejected() {
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
        assert_eq!(hungarian_match(&[vec![], vec![]]).unwrap(), Vec::<usize>::new());
    }
}
