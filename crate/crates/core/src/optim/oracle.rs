//! Closed-form minimizers of the training loss: PCA for one subspace, K-subspaces for a mixture.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::dae::DaeParams;
use crate::error::{invalid, Result};
use crate::linalg::{
    effective_rank, gaussian_matrix, hcat, hsplit, left_singular, orthogonal_complement,
    orthonormalize, range_basis,
};

/// Top-`d` left singular vectors of the data.
///
/// When the data has rank `r < d` the last `d − r` columns are an arbitrary (but
/// deterministic) orthonormal completion; every such completion is an optimum.
pub fn pca_oracle(samples: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let (top, r) = principal_part(samples, d)?;
    if r >= d {
        return Ok(top);
    }
    let comp = orthogonal_complement(&top);
    Ok(hcat(&[top, comp.columns(0, d - r).into_owned()]))
}

/// Like [`pca_oracle`], but a rank-deficient completion is chosen to overlap `truth` as
/// little as possible: orthogonal to it whenever the ambient dimension allows.
pub fn pca_oracle_adversarial(
    samples: &DMatrix<f64>,
    d: usize,
    truth: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (top, r) = principal_part(samples, d)?;
    if r >= d {
        return Ok(top);
    }
    let need = d - r;
    let joint = range_basis(&hcat(&[top.clone(), truth.clone()]));
    let outside = orthogonal_complement(&joint);
    if outside.ncols() >= need {
        return Ok(hcat(&[top, outside.columns(0, need).into_owned()]));
    }
    // not enough room: use all of the outside, then the directions inside
    // span(top, truth) ⊖ span(top) that see the least of `truth`
    let rest = need - outside.ncols();
    let resid = truth - &top * (top.transpose() * truth);
    let w = range_basis(&resid);
    let overlap = w.transpose() * truth * truth.transpose() * &w;
    let eig = SymmetricEigen::new(overlap);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut pick = DMatrix::zeros(w.ncols(), rest);
    for (j, &i) in order.iter().take(rest).enumerate() {
        pick.set_column(j, &eig.eigenvectors.column(i));
    }
    let inside = &w * pick;
    Ok(orthonormalize(&hcat(&[top, outside, inside])))
}

fn principal_part(samples: &DMatrix<f64>, d: usize) -> Result<(DMatrix<f64>, usize)> {
    let n = samples.nrows();
    if d == 0 || d > n {
        return Err(invalid(format!("target dimension {d} invalid for n = {n}")));
    }
    let (u, s) = left_singular(samples);
    let r = effective_rank(&s, samples.nrows(), samples.ncols()).min(d);
    Ok((u.columns(0, r).into_owned(), r))
}

/// Result of the alternating K-subspaces fit.
#[derive(Debug, Clone)]
pub struct KSubspacesFit {
    pub params: DaeParams,
    pub assignments: Vec<usize>,
    /// `(1/N) Σ_i max_k ‖U_kᵀ x_i‖²`.
    pub objective: f64,
    /// Objective after each alternation of the winning restart.
    pub history: Vec<f64>,
}

const MAX_ALTERNATIONS: usize = 200;

fn energies(bases: &[DMatrix<f64>], samples: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    bases.iter().map(|u| u.transpose() * samples).collect()
}

/// Argmax assignment (ties to the lowest index) and the resulting objective.
fn assign(bases: &[DMatrix<f64>], samples: &DMatrix<f64>) -> (Vec<usize>, f64, Vec<f64>) {
    let proj = energies(bases, samples);
    let count = samples.ncols();
    let mut labels = vec![0; count];
    let mut best = vec![f64::NEG_INFINITY; count];
    for (k, p) in proj.iter().enumerate() {
        for i in 0..count {
            let e = p.column(i).norm_squared();
            if e > best[i] {
                best[i] = e;
                labels[i] = k;
            }
        }
    }
    let obj = best.iter().sum::<f64>() / count as f64;
    (labels, obj, best)
}

fn objective_for(bases: &[DMatrix<f64>], samples: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let proj = energies(bases, samples);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| proj[k].column(i).norm_squared())
        .sum();
    total / samples.ncols() as f64
}

/// Top-`d` left singular vectors of the given columns, completed at random if needed.
fn fit_subspace<R: Rng + ?Sized>(rng: &mut R, cols: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let n = cols.nrows();
    let (u, s) = left_singular(cols);
    let r = effective_rank(&s, cols.nrows(), cols.ncols()).min(d);
    let top = u.columns(0, r).into_owned();
    if r == d {
        return top;
    }
    let extra = gaussian_matrix(rng, n, d - r);
    let extra = &extra - &top * (top.transpose() * &extra);
    orthonormalize(&hcat(&[top, extra]))
}

fn select_columns(samples: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(samples.nrows(), idx.len());
    for (j, &i) in idx.iter().enumerate() {
        out.set_column(j, &samples.column(i));
    }
    out
}

fn joint_retract(bases: Vec<DMatrix<f64>>, n: usize) -> Vec<DMatrix<f64>> {
    let dims: Vec<usize> = bases.iter().map(|u| u.ncols()).collect();
    if dims.iter().sum::<usize>() <= n {
        hsplit(&orthonormalize(&hcat(&bases)), &dims)
    } else {
        bases
    }
}

/// Seeds each basis from a random sample and its `d − 1` most coherent companions.
///
/// The first seed is uniform; later seeds are drawn with probability proportional to the
/// energy left unexplained by the bases chosen so far.
fn coherence_seed<R: Rng + ?Sized>(rng: &mut R, samples: &DMatrix<f64>, k: usize, d: usize) -> Vec<DMatrix<f64>> {
    let count = samples.ncols();
    let norms: Vec<f64> = (0..count).map(|i| samples.column(i).norm()).collect();
    let mut bases: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let resid: Vec<f64> = (0..count)
            .map(|i| {
                let x = samples.column(i);
                let captured: f64 = bases.iter().map(|u| (u.transpose() * x).norm_squared()).sum();
                (x.norm_squared() - captured).max(0.0)
            })
            .collect();
        let total: f64 = resid.iter().sum();
        let seed = if total > 0.0 {
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = count - 1;
            for (i, r) in resid.iter().enumerate() {
                if pick < *r {
                    chosen = i;
                    break;
                }
                pick -= r;
            }
            chosen
        } else {
            rng.random_range(0..count)
        };
        let anchor = samples.column(seed);
        let mut order: Vec<(f64, usize)> = (0..count)
            .map(|i| {
                let c = if norms[i] > 0.0 && norms[seed] > 0.0 {
                    (anchor.dot(&samples.column(i)) / (norms[i] * norms[seed])).abs()
                } else {
                    0.0
                };
                (if i == seed { f64::INFINITY } else { c }, i)
            })
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let idx: Vec<usize> = order.iter().take(d.min(count)).map(|&(_, i)| i).collect();
        bases.push(fit_subspace(rng, &select_columns(samples, &idx), d));
    }
    joint_retract(bases, samples.nrows())
}

fn alternate<R: Rng + ?Sized>(rng: &mut R, samples: &DMatrix<f64>, start: Vec<DMatrix<f64>>, d: usize) -> (Vec<DMatrix<f64>>, Vec<usize>, f64, Vec<f64>) {
    let n = samples.nrows();
    let k = start.len();
    let mut bases = start;
    let (mut labels, mut obj, mut fit) = assign(&bases, samples);
    let mut history = vec![obj];
    for _ in 0..MAX_ALTERNATIONS {
        let mut next = Vec::with_capacity(k);
        for c in 0..k {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let cols = if idx.is_empty() {
                // reseed from the samples the current bases explain worst
                let mut worst: Vec<usize> = (0..labels.len()).collect();
                let rel = |i: usize| {
                    let e = samples.column(i).norm_squared();
                    if e > 0.0 { fit[i] / e } else { 1.0 }
                };
                worst.sort_by(|&a, &b| rel(a).total_cmp(&rel(b)).then(a.cmp(&b)));
                select_columns(samples, &worst[..d.min(worst.len())])
            } else {
                select_columns(samples, &idx)
            };
            next.push(fit_subspace(rng, &cols, d));
        }
        let next = joint_retract(next, n);
        let (new_labels, new_obj, new_fit) = assign(&next, samples);
        if new_obj < obj {
            // the joint retraction can give back more than the update gained
            break;
        }
        let settled = new_labels == labels;
        bases = next;
        labels = new_labels;
        obj = new_obj;
        fit = new_fit;
        history.push(obj);
        if settled {
            break;
        }
    }
    (bases, labels, obj, history)
}

/// Alternating maximization of `Σ_k Σ_{i ∈ C_k} ‖U_kᵀ x_i‖²` over jointly orthonormal bases.
///
/// Runs `restarts` randomly seeded starts, plus `seed` when given, and keeps the best.
pub fn ksubspaces_oracle<R: Rng + ?Sized>(
    samples: &DMatrix<f64>,
    k: usize,
    d: usize,
    restarts: usize,
    rng: &mut R,
    seed: Option<&DaeParams>,
) -> Result<KSubspacesFit> {
    let n = samples.nrows();
    if k == 0 || d == 0 || k * d > n {
        return Err(invalid(format!("K = {k}, d = {d} infeasible for n = {n}")));
    }
    if samples.ncols() == 0 {
        return Err(invalid("no samples"));
    }
    if restarts == 0 && seed.is_none() {
        return Err(invalid("need at least one restart"));
    }
    let mut starts: Vec<Vec<DMatrix<f64>>> = Vec::new();
    if let Some(p) = seed {
        if p.k() != k || p.dims().iter().any(|&w| w != d) || p.n() != n {
            return Err(invalid("seed parameters disagree with K, d or n"));
        }
        starts.push(p.bases().to_vec());
    }
    let mut best: Option<KSubspacesFit> = None;
    for r in 0..restarts + starts.len() {
        let start = if r < starts.len() {
            starts[r].clone()
        } else {
            coherence_seed(rng, samples, k, d)
        };
        let (bases, labels, obj, history) = alternate(rng, samples, start, d);
        if best.as_ref().is_none_or(|b| obj > b.objective) {
            best = Some(KSubspacesFit {
                params: DaeParams::new(bases)?,
                assignments: labels,
                objective: obj,
                history,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

/// Objective of fixed bases with argmax assignments.
pub fn ksubspaces_objective(params: &DaeParams, samples: &DMatrix<f64>) -> f64 {
    assign(params.bases(), samples).1
}

/// Objective of fixed bases under given assignments.
pub fn ksubspaces_objective_with(params: &DaeParams, samples: &DMatrix<f64>, labels: &[usize]) -> f64 {
    objective_for(params.bases(), samples, labels)
}
