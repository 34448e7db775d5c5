//! Bipartite assignment of ground-truth boxes to prediction slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{softplus, Coords, LossConfig};

/// Injective assignment of ground truths to slots: `assignment[j]` is the slot
/// matched to ground truth `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub assignment: Vec<usize>,
    /// Sum over ground truths (in index order) of the pairwise matching cost.
    pub cost: f64,
    /// The full objective `F_conf + alpha * F_loc` at this assignment.
    pub objective: f64,
}

impl Matching {
    /// Slot-indexed view: `Some(j)` when slot `i` is matched to ground truth `j`.
    pub fn slot_to_gt(&self, slots: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; slots];
        for (j, &i) in self.assignment.iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }

    pub fn is_valid(&self, slots: usize) -> bool {
        let mut seen = vec![false; slots];
        self.assignment.iter().all(|&i| i < slots && !std::mem::replace(&mut seen[i], true))
    }
}

/// Change in the objective when slot `i` (location `l`, logit `z`) switches from
/// unmatched to matched with ground truth `g`:
/// `alpha/2 * |l - g|^2 - log c + log(1 - c)`, and `-log c + log(1 - c) = -z`.
pub fn pair_cost(l: &Coords, z: f64, g: &Coords, alpha: f64) -> f64 {
    let d2: f64 = l.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
    alpha * 0.5 * d2 - z
}

/// Row-major `gts x slots` cost matrix.
pub fn cost_matrix(locs: &[Coords], logits: &[f64], gts: &[Coords], alpha: f64) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| locs.iter().zip(logits).map(|(l, &z)| pair_cost(l, z, g, alpha)).collect())
        .collect()
}

/// Sums `cost[j][assignment[j]]` in ground-truth order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(j, &i)| cost[j][i]).sum()
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols), by
/// the shortest-augmenting-path Hungarian method with potentials, O(rows^2 * cols).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        p[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Greedy approximation: repeatedly take the cheapest remaining (row, column)
/// pair, ties broken by lowest column then lowest row.
pub fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let mut assignment = vec![usize::MAX; n];
    let mut col_used = vec![false; m];
    for _ in 0..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..m {
            if col_used[i] {
                continue;
            }
            for (j, row) in cost.iter().enumerate() {
                if assignment[j] != usize::MAX {
                    continue;
                }
                if best.map_or(true, |b| row[i] < b.2) {
                    best = Some((j, i, row[i]));
                }
            }
        }
        let (j, i, _) = best.expect("rows <= columns");
        assignment[j] = i;
        col_used[i] = true;
    }
    assignment
}

/// The assignment minimizing the MultiBox objective for fixed network outputs.
/// `exact` selects the Hungarian solver; otherwise a greedy approximation.
pub fn best_matching(
    locs: &[Coords],
    logits: &[f64],
    gts: &[Coords],
    cfg: &LossConfig,
    exact: bool,
) -> Result<Matching> {
    if locs.len() != logits.len() {
        return Err(Error::Shape(format!("{} locations vs {} logits", locs.len(), logits.len())));
    }
    if gts.len() > locs.len() {
        return Err(Error::TooManyGroundTruths { gts: gts.len(), slots: locs.len() });
    }
    let cost = cost_matrix(locs, logits, gts, cfg.alpha);
    let assignment = if exact { hungarian(&cost) } else { greedy_assignment(&cost) };
    let total = assignment_cost(&cost, &assignment);
    let baseline: f64 = logits.iter().map(|&z| softplus(z)).sum();
    Ok(Matching { assignment, cost: total, objective: baseline + total })
}
