//! Matching learned bases to the ground truth up to a permutation.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::subspace_distance;

/// Mean projector distance at or below this counts as a recovery.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// Largest K searched exhaustively; beyond it matching is greedy.
pub const EXHAUSTIVE_MAX_K: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// `permutation[k]` is the learned component matched to true component `k`.
    pub permutation: Vec<usize>,
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub success: bool,
    /// True when the permutation came from greedy matching and may be suboptimal.
    pub greedy: bool,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Best permutation of `learned` against `truth` by mean projector distance.
pub fn match_and_score(
    learned: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    threshold: f64,
) -> Result<RecoveryReport> {
    let k = truth.len();
    if learned.len() != k || k == 0 {
        return Err(invalid(format!("{} learned vs {} true components", learned.len(), k)));
    }
    // cost[a][b]: learned b against true a; shape mismatches are never matched
    let mut cost = vec![vec![f64::INFINITY; k]; k];
    for (a, u) in truth.iter().enumerate() {
        for (b, v) in learned.iter().enumerate() {
            if u.shape() == v.shape() {
                cost[a][b] = subspace_distance(v, u)?;
            }
        }
    }
    let (permutation, greedy) = if k <= EXHAUSTIVE_MAX_K {
        let best = permutations(k)
            .into_iter()
            .min_by(|p, q| {
                let sp: f64 = p.iter().enumerate().map(|(a, &b)| cost[a][b]).sum();
                let sq: f64 = q.iter().enumerate().map(|(a, &b)| cost[a][b]).sum();
                sp.total_cmp(&sq)
            })
            .expect("k >= 1");
        (best, false)
    } else {
        let mut used = vec![false; k];
        let mut perm = vec![0; k];
        let mut pairs: Vec<(f64, usize, usize)> = (0..k)
            .flat_map(|a| (0..k).map(move |b| (a, b)))
            .map(|(a, b)| (cost[a][b], a, b))
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut done = vec![false; k];
        for (_, a, b) in pairs {
            if !done[a] && !used[b] {
                perm[a] = b;
                done[a] = true;
                used[b] = true;
            }
        }
        (perm, true)
    };
    let distances: Vec<f64> = permutation.iter().enumerate().map(|(a, &b)| cost[a][b]).collect();
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(invalid("component dimensions cannot be matched"));
    }
    let mean_distance = distances.iter().sum::<f64>() / k as f64;
    Ok(RecoveryReport {
        permutation,
        distances,
        mean_distance,
        success: mean_distance <= threshold,
        greedy,
    })
}
