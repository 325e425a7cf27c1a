//! Minimum-cost one-to-one assignment (Hungarian method with potentials).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Solves the rectangular assignment problem for a row-major `rows x cols`
/// cost matrix. Every row is assigned when `rows <= cols`, every column
/// otherwise.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::dim("cost matrix", rows * cols, cost.len()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let a = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
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
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    Ok(Assignment { pairs, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_swap() {
        let a = hungarian(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 0.0);
        let a = hungarian(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_both_ways() {
        // 2 rows, 3 cols: column 1 stays free.
        let c = [1.0, 5.0, 2.0, 4.0, 6.0, 1.0];
        let a = hungarian(&c, 2, 3).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 2)]);
        assert_eq!(a.total, 2.0);
        // Transposed problem yields the transposed pairing.
        let t = [1.0, 4.0, 5.0, 6.0, 2.0, 1.0];
        let b = hungarian(&t, 3, 2).unwrap();
        assert_eq!(b.pairs, vec![(0, 0), (2, 1)]);
        assert_eq!(b.total, 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&[1.0, f64::NAN], 1, 2).is_err());
        assert!(hungarian(&[1.0], 1, 2).is_err());
        assert!(hungarian(&[], 0, 3).unwrap().pairs.is_empty());
    }
}
