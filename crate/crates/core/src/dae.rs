//! Low-rank denoisers, their Jacobians and numerical rank.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{hcat, orthonormality_error, singular_values, softmax};
use crate::molrg::MoLRGModel;
use crate::schedule::ScheduleState;

const PARAM_TOL: f64 = 1e-8;

/// Learnable bases `θ = {U_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeParams {
    bases: Vec<DMatrix<f64>>,
    joint_orthonormal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Single,
    Softmax,
    Hardmax,
}

impl std::str::FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "softmax" => Ok(Self::Softmax),
            "hardmax" => Ok(Self::Hardmax),
            _ => Err(invalid(format!("unknown parameterization `{s}`"))),
        }
    }
}

impl std::fmt::Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Softmax => "softmax",
            Self::Hardmax => "hardmax",
        })
    }
}

impl DaeParams {
    pub fn new(bases: Vec<DMatrix<f64>>) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::InvalidParams("no bases".into()));
        }
        let n = bases[0].nrows();
        for (k, u) in bases.iter().enumerate() {
            if u.nrows() != n || u.ncols() == 0 || u.ncols() > n {
                return Err(Error::InvalidParams(format!("basis {k} has shape {:?}", u.shape())));
            }
            let err = orthonormality_error(u);
            if !(err <= PARAM_TOL) {
                return Err(Error::InvalidParams(format!(
                    "basis {k} is not orthonormal (error {err:.3e})"
                )));
            }
        }
        let total: usize = bases.iter().map(|u| u.ncols()).sum();
        let joint_orthonormal = total <= n && orthonormality_error(&hcat(&bases)) <= PARAM_TOL;
        Ok(Self {
            bases,
            joint_orthonormal,
        })
    }

    pub fn from_model(model: &MoLRGModel) -> Self {
        Self::new(model.bases().to_vec()).expect("model bases are orthonormal")
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn into_bases(self) -> Vec<DMatrix<f64>> {
        self.bases
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn n(&self) -> usize {
        self.bases[0].nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.bases.iter().map(|u| u.ncols()).collect()
    }

    pub fn joint_orthonormal(&self) -> bool {
        self.joint_orthonormal
    }

    pub fn concatenated(&self) -> DMatrix<f64> {
        hcat(&self.bases)
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(invalid(format!("vector of length {} for n = {}", x.len(), self.n())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = ParamsDoc {
            n: self.n(),
            k: self.k(),
            dims: self.dims(),
            bases: self
                .bases
                .iter()
                .map(|b| b.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            joint_orthonormal: self.joint_orthonormal,
        };
        serde_json::to_string_pretty(&doc).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut bases = Vec::with_capacity(doc.bases.len());
        for (rows, &d) in doc.bases.iter().zip(&doc.dims) {
            if rows.len() != doc.n || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Serialization("basis shape disagrees with n/dims".into()));
            }
            bases.push(DMatrix::from_fn(doc.n, d, |i, j| rows[i][j]));
        }
        if bases.len() != doc.k {
            return Err(Error::Serialization("K disagrees with bases".into()));
        }
        Self::new(bases)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsDoc {
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    dims: Vec<usize>,
    bases: Vec<Vec<Vec<f64>>>,
    joint_orthonormal: bool,
}

/// `s/(s²+γ²) · U Uᵀ x`. Accepts `γ = 0`.
pub fn dae_single(u: &DMatrix<f64>, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
    if orthonormality_error(u) > PARAM_TOL {
        return Err(Error::InvalidParams("basis is not orthonormal".into()));
    }
    if x.len() != u.nrows() {
        return Err(invalid("dimension mismatch"));
    }
    Ok(u * (u.transpose() * x) * st.shrink())
}

/// Soft-max weights `softmax_k(φ‖U_kᵀx‖²)`.
pub fn softmax_weights(params: &DaeParams, x: &DVector<f64>, st: &ScheduleState) -> Result<Vec<f64>> {
    params.check_dim(x)?;
    st.require_noise()?;
    let logits: Vec<f64> = params
        .bases
        .iter()
        .map(|u| st.phi * (u.transpose() * x).norm_squared())
        .collect();
    Ok(softmax(&logits))
}

pub fn dae_softmax(params: &DaeParams, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
    let w = softmax_weights(params, x, st)?;
    let mut acc = DVector::zeros(params.n());
    for (u, wk) in params.bases.iter().zip(w) {
        if wk > 0.0 {
            acc += u * (u.transpose() * x) * wk;
        }
    }
    Ok(acc * st.shrink())
}

/// Index of the basis capturing the most energy of the clean `x0`; ties go to the lowest index.
pub fn hardmax_index(params: &DaeParams, x0: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (k, u) in params.bases.iter().enumerate() {
        let v = (u.transpose() * x0).norm_squared();
        if v > best_val {
            best = k;
            best_val = v;
        }
    }
    best
}

pub fn hardmax_weights(params: &DaeParams, x0: &DVector<f64>) -> Vec<f64> {
    let mut w = vec![0.0; params.k()];
    w[hardmax_index(params, x0)] = 1.0;
    w
}

pub fn dae_hardmax(
    params: &DaeParams,
    x0: &DVector<f64>,
    x: &DVector<f64>,
    st: &ScheduleState,
) -> Result<DVector<f64>> {
    params.check_dim(x)?;
    params.check_dim(x0)?;
    st.require_noise()?;
    let u = &params.bases[hardmax_index(params, x0)];
    Ok(u * (u.transpose() * x) * st.shrink())
}

/// Central-difference Jacobian; column `j` is `(f(x + h e_j) − f(x − h e_j)) / 2h`.
pub fn jacobian_fd<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// Closed-form Jacobian of the posterior mean.
pub fn jacobian_analytic_gt(
    model: &MoLRGModel,
    x: &DVector<f64>,
    st: &ScheduleState,
) -> Result<DMatrix<f64>> {
    let w = model.posterior_weights(x, st)?;
    jacobian_of_weighted_projection(model.bases(), &w, x, st)
}

/// Closed-form Jacobian of the soft-max denoiser.
pub fn jacobian_analytic_softmax(
    params: &DaeParams,
    x: &DVector<f64>,
    st: &ScheduleState,
) -> Result<DMatrix<f64>> {
    let w = softmax_weights(params, x, st)?;
    jacobian_of_weighted_projection(params.bases(), &w, x, st)
}

/// `c·[Σ_k w_k (2φ P_k x xᵀ + I) P_k − 2φ m mᵀ]` with `m = Σ_k w_k P_k x`.
fn jacobian_of_weighted_projection(
    bases: &[DMatrix<f64>],
    w: &[f64],
    x: &DVector<f64>,
    st: &ScheduleState,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut m = DVector::zeros(n);
    for (u, &wk) in bases.iter().zip(w) {
        if wk == 0.0 {
            continue;
        }
        let px = u * (u.transpose() * x);
        jac += u * u.transpose() * wk;
        jac += &px * px.transpose() * (2.0 * st.phi * wk);
        m += px * wk;
    }
    jac -= &m * m.transpose() * (2.0 * st.phi);
    Ok(jac * st.shrink())
}

/// Singular spectrum of a Jacobian and its numerical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub eta: f64,
    pub n: usize,
    /// Time, noise level and SNR of the state the Jacobian was taken at, when known.
    pub t: f64,
    pub sigma: f64,
    pub snr: f64,
}

impl RankReport {
    pub fn at(mut self, st: &ScheduleState) -> Self {
        self.t = st.t;
        self.sigma = st.sigma;
        self.snr = st.snr();
        self
    }

    pub fn rank_ratio(&self) -> f64 {
        self.numerical_rank as f64 / self.n as f64
    }
}

/// Smallest `r` whose leading squared singular values exceed an `eta²` share of the total.
pub fn numerical_rank(j: &DMatrix<f64>, eta: f64) -> Result<RankReport> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    let sv = singular_values(j);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut rank = 0;
    if total > 0.0 {
        let target = eta * eta;
        let mut acc = 0.0;
        for (i, s) in sv.iter().enumerate() {
            acc += s * s;
            if acc / total > target {
                rank = i + 1;
                break;
            }
        }
        if rank == 0 {
            rank = sv.len();
        }
    }
    Ok(RankReport {
        singular_values: sv,
        numerical_rank: rank,
        eta,
        n: j.nrows().max(j.ncols()),
        t: f64::NAN,
        sigma: f64::NAN,
        snr: f64::NAN,
    })
}
