//! Minimum-cost perfect matching by shortest augmenting paths, `O(n³)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row `i` is matched to column `assignment[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub assignment: Vec<usize>,
    pub total: f64,
}

/// Solves the square assignment problem on a row-major `n×n` cost matrix.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::Shape(format!("cost matrix of {} entries is not {n}×{n}", cost.len())));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Invalid(format!("non-finite cost {bad}")));
    }
    if n == 0 {
        return Ok(Assignment { assignment: Vec::new(), total: 0.0 });
    }
    // Potentials u (rows) and v (columns), 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Assignment { assignment, total })
}

/// Pairwise Euclidean pixel distances between two equally sized batches.
pub fn l2_cost_matrix(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::Shape(format!("image sets differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    let d = a.len() / n.max(1);
    let rows = |t: &Tensor<f32>| t.data().chunks_exact(d.max(1)).map(|r| r.to_vec()).collect::<Vec<_>>();
    let (ra, rb) = (rows(a), rows(b));
    let mut out = Vec::with_capacity(n * n);
    for x in &ra {
        for y in &rb {
            let s: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
            out.push(s.sqrt());
        }
    }
    Ok(out)
}

/// Minimum total L2 distance pairing of `set_a[i]` with `set_b[assignment[i]]`.
pub fn hungarian_pair(set_a: &Tensor<f32>, set_b: &Tensor<f32>) -> Result<Assignment> {
    if set_a.shape().first() != set_b.shape().first() {
        return Err(Error::Dimension {
            axis: "set size",
            expected: set_a.shape().first().copied().unwrap_or(0),
            actual: set_b.shape().first().copied().unwrap_or(0),
        });
    }
    let n = set_a.shape()[0];
    hungarian(&l2_cost_matrix(set_a, set_b)?, n)
}
