//! Empirical checks of the Gaussian norm and sample-covariance concentration bounds.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::linalg::gaussian_matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub d: usize,
    pub count: usize,
    pub trials: usize,
    /// `2√log N + 2`.
    pub norm_bound: f64,
    /// `9(√d + √log N)/√N`.
    pub cov_bound: f64,
    pub norm_checks: usize,
    pub norm_violations: usize,
    pub cov_checks: usize,
    pub cov_violations: usize,
    pub max_norm_deviation: f64,
    pub max_cov_deviation: f64,
}

impl ConcentrationReport {
    pub fn norm_rate(&self) -> f64 {
        self.norm_violations as f64 / self.norm_checks as f64
    }

    pub fn cov_rate(&self) -> f64 {
        self.cov_violations as f64 / self.cov_checks as f64
    }
}

pub fn norm_bound(count: usize) -> f64 {
    2.0 * (count as f64).ln().sqrt() + 2.0
}

pub fn cov_bound(d: usize, count: usize) -> f64 {
    9.0 * ((d as f64).sqrt() + (count as f64).ln().sqrt()) / (count as f64).sqrt()
}

/// Largest `|‖a_i‖ − √d|` over the columns.
pub fn norm_deviation(a: &DMatrix<f64>) -> f64 {
    let root_d = (a.nrows() as f64).sqrt();
    a.column_iter().map(|c| (c.norm() - root_d).abs()).fold(0.0, f64::max)
}

/// `‖(1/N) Σ a_i a_iᵀ − I‖₂`.
pub fn covariance_deviation(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let cov = (a * a.transpose()) / a.ncols() as f64 - DMatrix::identity(d, d);
    cov.symmetric_eigenvalues().iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Checks both bounds on `trials` independent `d × count` standard normal batches.
pub fn concentration_suite<R: Rng + ?Sized>(
    trials: usize,
    d: usize,
    count: usize,
    rng: &mut R,
) -> Result<ConcentrationReport> {
    if trials == 0 || d == 0 || count < 2 {
        return Err(invalid("need trials ≥ 1, d ≥ 1 and N ≥ 2"));
    }
    let nb = norm_bound(count);
    let cb = cov_bound(d, count);
    let root_d = (d as f64).sqrt();
    let mut report = ConcentrationReport {
        d,
        count,
        trials,
        norm_bound: nb,
        cov_bound: cb,
        norm_checks: 0,
        norm_violations: 0,
        cov_checks: 0,
        cov_violations: 0,
        max_norm_deviation: 0.0,
        max_cov_deviation: 0.0,
    };
    for _ in 0..trials {
        let a = gaussian_matrix(rng, d, count);
        for c in a.column_iter() {
            let dev = (c.norm() - root_d).abs();
            report.max_norm_deviation = report.max_norm_deviation.max(dev);
            report.norm_checks += 1;
            if dev > nb {
                report.norm_violations += 1;
            }
        }
        let dev = covariance_deviation(&a);
        report.max_cov_deviation = report.max_cov_deviation.max(dev);
        report.cov_checks += 1;
        if dev > cb {
            report.cov_violations += 1;
        }
    }
    Ok(report)
}
