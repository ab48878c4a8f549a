//! Small dense linear-algebra helpers shared by the model, denoiser and oracle code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

/// Thin QR with the sign of each column chosen so that `R` has a nonnegative diagonal.
///
/// Requires `a.nrows() >= a.ncols()`.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert!(a.nrows() >= a.ncols());
    let qr = a.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `‖UᵀU − I‖_F`.
pub fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
    let g = u.transpose() * u;
    (g - DMatrix::identity(u.ncols(), u.ncols())).norm()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // filled column-major
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    for x in v.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    v
}

pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> DMatrix<f64> {
    orthonormalize(&gaussian_matrix(rng, n, d))
}

/// Horizontal concatenation.
pub fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Split columns into blocks of the given widths.
pub fn hsplit(m: &DMatrix<f64>, widths: &[usize]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut c = 0;
    for &w in widths {
        out.push(m.columns(c, w).into_owned());
        c += w;
    }
    out
}

/// Left singular vectors and singular values of `x`, sorted by decreasing singular value.
///
/// Vectors come from a symmetric eigendecomposition of the square QR factor's Gram matrix;
/// nalgebra's SVD can return left vectors of rank-deficient inputs that are off by O(1).
/// Values come from the SVD, which keeps tiny singular values accurate.
pub fn left_singular(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    if x.ncols() == 0 || x.nrows() == 0 {
        return (DMatrix::zeros(x.nrows(), 0), Vec::new());
    }
    let (u, eigenvalues) = if x.nrows() >= x.ncols() {
        // x xᵀ = Q (R Rᵀ) Qᵀ
        let qr = x.clone().qr();
        let r = qr.r();
        let eig = SymmetricEigen::new(&r * r.transpose());
        (qr.q() * eig.eigenvectors, eig.eigenvalues)
    } else {
        // xᵀ = Q R gives x xᵀ = Rᵀ R
        let r = x.transpose().qr().r();
        let eig = SymmetricEigen::new(r.transpose() * r);
        (eig.eigenvectors, eig.eigenvalues)
    };
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let values = singular_values(x);
    let mut out = DMatrix::zeros(u.nrows(), order.len());
    for (j, &k) in order.iter().enumerate() {
        out.set_column(j, &u.column(k));
    }
    (out, values)
}

/// Singular values only, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut v: Vec<f64> = m.singular_values().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Number of singular values above a relative round-off threshold.
pub fn effective_rank(values: &[f64], rows: usize, cols: usize) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    let tol = top * f64::EPSILON * rows.max(cols) as f64 * 16.0;
    values.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis of the orthogonal complement of `span(basis)`.
///
/// `basis` must have orthonormal columns.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let p = DMatrix::identity(n, n) - basis * basis.transpose();
    let eig = SymmetricEigen::new(p);
    let mut cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    cols.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.set_column(j, &eig.eigenvectors.column(i));
    }
    if out.ncols() > 0 {
        out = orthonormalize(&out);
    }
    out
}

/// Orthonormal basis of `span(m)` computed from its SVD.
pub fn range_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (u, s) = left_singular(m);
    let r = effective_rank(&s, m.nrows(), m.ncols());
    u.columns(0, r).into_owned()
}

/// `‖UUᵀ − VVᵀ‖_F` evaluated as `sqrt(2d − 2‖UᵀV‖_F²)`.
pub fn subspace_distance(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let d = u.ncols() as f64;
    let c = (u.transpose() * v).norm_squared();
    Ok((2.0 * d - 2.0 * c).max(0.0).sqrt())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormalize_gives_positive_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_matrix(&mut rng, 7, 3);
        let q = orthonormalize(&a);
        assert!(orthonormality_error(&q) < 1e-13);
        let r = q.transpose() * &a;
        for j in 0..3 {
            assert!(r[(j, j)] > 0.0);
        }
    }

    #[test]
    fn distance_matches_dense_projectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let u = random_orthonormal(&mut rng, 9, 4);
            let v = random_orthonormal(&mut rng, 9, 4);
            let dense = (&u * u.transpose() - &v * v.transpose()).norm();
            assert!((subspace_distance(&u, &v).unwrap() - dense).abs() < 1e-10);
        }
    }

    #[test]
    fn distance_of_orthogonal_blocks() {
        let e = DMatrix::<f64>::identity(6, 6);
        let u = e.columns(0, 3).into_owned();
        let v = e.columns(3, 3).into_owned();
        assert!((subspace_distance(&u, &v).unwrap() - 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(subspace_distance(&u, &u).unwrap(), 0.0);
        assert!(subspace_distance(&u, &e.columns(0, 2).into_owned()).is_err());
    }

    #[test]
    fn complement_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_orthonormal(&mut rng, 8, 3);
        let c = orthogonal_complement(&u);
        assert_eq!(c.ncols(), 5);
        assert!((u.transpose() * &c).norm() < 1e-12);
        assert!(orthonormality_error(&c) < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let w = softmax(&[1e300, 1e300 - 1e290, -1e300]);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn left_singular_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (u, s) = left_singular(&m);
        assert_eq!(s, vec![3.0, 2.0, 1.0]);
        assert!((u[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn left_vectors_of_tall_low_rank_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let basis = random_orthonormal(&mut rng, 48, 2);
            let x = &basis * gaussian_matrix(&mut rng, 2, 7);
            let (u, s) = left_singular(&x);
            assert_eq!(u.shape(), (48, 7));
            assert!(s[2] < 1e-12 * s[0]);
            let top = u.columns(0, 2).into_owned();
            assert!(subspace_distance(&top, &basis).unwrap() < 1e-7);
            assert!(orthonormality_error(&u) < 1e-12);
        }
        // wide input
        let basis = random_orthonormal(&mut rng, 6, 2);
        let x = &basis * gaussian_matrix(&mut rng, 2, 40);
        let (u, _) = left_singular(&x);
        assert_eq!(u.shape(), (6, 6));
        assert!(subspace_distance(&u.columns(0, 2).into_owned(), &basis).unwrap() < 1e-7);
    }
}
