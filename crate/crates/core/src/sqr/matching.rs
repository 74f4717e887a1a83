//! Minimum-cost bipartite matching between predictions and ground truth.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BoxCxcywh};
use crate::error::{Error, Result};

/// Matched (query, gt) pairs sorted by query index. Unmatched queries are background.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Checks injectivity and the pair count against the problem size.
    pub fn validate(&self, num_queries: usize, num_gt: usize) -> Result<()> {
        let mut seen_q = vec![false; num_queries];
        let mut seen_g = vec![false; num_gt];
        for &(q, g) in &self.pairs {
            if q >= num_queries || g >= num_gt || seen_q[q] || seen_g[g] {
                return Err(Error::Contract(format!("invalid match pair ({q}, {g})")));
            }
            seen_q[q] = true;
            seen_g[g] = true;
        }
        if self.pairs.len() != num_queries.min(num_gt) {
            return Err(Error::Contract(format!(
                "{} pairs for {num_queries} queries and {num_gt} targets",
                self.pairs.len()
            )));
        }
        Ok(())
    }
}

/// Matching cost weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.class > 0.0 && self.l1 > 0.0 && self.giou > 0.0) {
            return Err(Error::Config(format!("match weights must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Cost matrix (queries × gts), row-major. `probs` holds per-query class
/// probabilities, `num_classes` wide.
pub fn match_cost(
    probs: &[f64],
    num_classes: usize,
    boxes: &[BoxCxcywh],
    gt_boxes: &[BoxCxcywh],
    gt_labels: &[usize],
    w: &MatchWeights,
) -> Vec<f64> {
    let mut cost = Vec::with_capacity(boxes.len() * gt_boxes.len());
    for (q, b) in boxes.iter().enumerate() {
        for (g, t) in gt_boxes.iter().enumerate() {
            let p = probs[q * num_classes + gt_labels[g]];
            let l1: f64 = (0..4).map(|k| (b[k] - t[k]).abs()).sum();
            cost.push(w.class * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - giou(*b, *t)));
        }
    }
    cost
}

/// Optimal assignment for a rows × cols cost matrix. Every row of the smaller
/// side is assigned; ties go to the lowest index.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<MatchResult> {
    if cost.len() != rows * cols {
        return Err(Error::Shape(format!("cost has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matching cost {v}")));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult::default());
    }
    let mut pairs = if rows <= cols {
        solve(|i, j| cost[i * cols + j], rows, cols)
    } else {
        solve(|i, j| cost[j * cols + i], cols, rows)
            .into_iter()
            .map(|(g, q)| (q, g))
            .collect()
    };
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}

// Shortest augmenting paths with potentials, n ≤ m, 1-based internals.
fn solve(a: impl Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<(usize, usize)> {
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
                if !used[j] {
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
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// Sum of the matched entries.
pub fn assignment_cost(cost: &[f64], cols: usize, m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(q, g)| cost[q * cols + g]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        // assign each row of the smaller side to a distinct column of the other
        fn rec(cost: &dyn Fn(usize, usize) -> f64, i: usize, n: usize, used: &mut Vec<bool>) -> f64 {
            if i == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost(i, j) + rec(cost, i + 1, n, used));
                    used[j] = false;
                }
            }
            best
        }
        if rows <= cols {
            rec(&|i, j| cost[i * cols + j], 0, rows, &mut vec![false; cols])
        } else {
            rec(&|i, j| cost[j * cols + i], 0, cols, &mut vec![false; rows])
        }
    }

    #[test]
    fn matches_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            // dyadic costs keep every partial sum exact
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..4096) as f64 / 256.0).collect();
            let m = hungarian(&cost, rows, cols).unwrap();
            m.validate(rows, cols).unwrap();
            assert_eq!(assignment_cost(&cost, cols, &m), brute_force(&cost, rows, cols));
        }
    }

    #[test]
    fn single_pair_and_empty() {
        assert_eq!(hungarian(&[3.0], 1, 1).unwrap().pairs, vec![(0, 0)]);
        assert!(hungarian(&[], 4, 0).unwrap().pairs.is_empty());
        assert!(hungarian(&[], 0, 3).unwrap().pairs.is_empty());
        assert!(matches!(hungarian(&[f64::NAN], 1, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn identical_rows_go_to_the_lowest_query() {
        // three queries, one gt; queries 1 and 2 tie for best
        let m = hungarian(&[0.9, 0.2, 0.2], 3, 1).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        let m = hungarian(&[0.5, 0.5, 0.5, 0.5], 2, 2).unwrap();
        m.validate(2, 2).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn cost_terms() {
        let w = MatchWeights::default();
        let b = [0.5, 0.5, 0.2, 0.2];
        let c = match_cost(&[0.25, 0.75], 2, &[b], &[b], &[1], &w);
        assert!((c[0] - 2.0 * 0.25).abs() < 1e-12);
        assert!(MatchWeights { class: 0.0, ..w }.validate().is_err());
    }
}
