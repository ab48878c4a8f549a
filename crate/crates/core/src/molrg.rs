//! Mixture of low-rank Gaussians: model, sampling, marginal density, posterior mean and score.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    gaussian_matrix, gaussian_vector, hcat, hsplit, log_sum_exp, orthonormality_error,
    orthonormalize, softmax,
};
use crate::schedule::ScheduleState;

const BASIS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MoLRGModel {
    n: usize,
    dims: Vec<usize>,
    weights: Vec<f64>,
    bases: Vec<DMatrix<f64>>,
    mutually_orthogonal: bool,
}

/// Training data with the pieces it was built from: `x_i = U_{label_i} a_i + e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub noises: DMatrix<f64>,
    pub coeffs: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.column(i).into_owned()
    }

    /// Per-component sample counts `N_k`.
    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &l in &self.labels {
            if l < k {
                c[l] += 1;
            }
        }
        c
    }

    /// Dataset made of the given columns only, with zero noise and empty coefficients.
    pub fn from_samples(samples: DMatrix<f64>) -> Self {
        let n = samples.nrows();
        let m = samples.ncols();
        Self {
            samples,
            labels: vec![0; m],
            noises: DMatrix::zeros(n, m),
            coeffs: vec![DVector::zeros(0); m],
        }
    }
}

impl MoLRGModel {
    pub fn new(bases: Vec<DMatrix<f64>>, weights: Vec<f64>) -> Result<Self> {
        if bases.is_empty() {
            return Err(invalid("a mixture needs at least one component"));
        }
        if bases.len() != weights.len() {
            return Err(invalid(format!(
                "{} bases but {} weights",
                bases.len(),
                weights.len()
            )));
        }
        let n = bases[0].nrows();
        for (k, u) in bases.iter().enumerate() {
            if u.nrows() != n || u.ncols() == 0 || u.ncols() > n {
                return Err(invalid(format!("basis {k} has shape {:?}", u.shape())));
            }
            if orthonormality_error(u) > BASIS_TOL {
                return Err(Error::InvalidParams(format!("basis {k} is not orthonormal")));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(invalid("mixing weights must be nonnegative and sum to one"));
        }
        let dims = bases.iter().map(|u| u.ncols()).collect::<Vec<_>>();
        let total: usize = dims.iter().sum();
        let mutually_orthogonal = total <= n && orthonormality_error(&hcat(&bases)) <= BASIS_TOL;
        Ok(Self {
            n,
            dims,
            weights,
            bases,
            mutually_orthogonal,
        })
    }

    /// Uniform-weight model with Gaussian-orthonormalized bases.
    ///
    /// With `mutually_orthogonal` the bases are disjoint column blocks of one random
    /// orthonormal `n × Σd_k` matrix.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        dims: &[usize],
        mutually_orthogonal: bool,
    ) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0 || d > n) {
            return Err(invalid(format!("dims {dims:?} invalid for n = {n}")));
        }
        let total: usize = dims.iter().sum();
        let bases = if mutually_orthogonal {
            if total > n {
                return Err(Error::InfeasibleDims { total, n });
            }
            hsplit(&orthonormalize(&gaussian_matrix(rng, n, total)), dims)
        } else {
            dims.iter()
                .map(|&d| orthonormalize(&gaussian_matrix(rng, n, d)))
                .collect()
        };
        let k = dims.len();
        let mut model = Self::new(bases, vec![1.0 / k as f64; k])?;
        model.mutually_orthogonal = mutually_orthogonal || model.mutually_orthogonal;
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn mutually_orthogonal(&self) -> bool {
        self.mutually_orthogonal
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(invalid(format!("vector of length {} for n = {}", x.len(), self.n)));
        }
        Ok(())
    }

    fn draw_one<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        label: usize,
        noise_level: f64,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let a = gaussian_vector(rng, self.dims[label]);
        let mut e = DVector::zeros(self.n);
        if noise_level > 0.0 {
            let dir = gaussian_vector(rng, self.n);
            e = dir.normalize() * noise_level;
        }
        let x = &self.bases[label] * &a + &e;
        (x, e, a)
    }

    fn assemble<R: Rng + ?Sized>(&self, rng: &mut R, labels: Vec<usize>, noise: f64) -> Dataset {
        let m = labels.len();
        let mut samples = DMatrix::zeros(self.n, m);
        let mut noises = DMatrix::zeros(self.n, m);
        let mut coeffs = Vec::with_capacity(m);
        for (i, &l) in labels.iter().enumerate() {
            let (x, e, a) = self.draw_one(rng, l, noise);
            samples.set_column(i, &x);
            noises.set_column(i, &e);
            coeffs.push(a);
        }
        Dataset {
            samples,
            labels,
            noises,
            coeffs,
        }
    }

    /// `count` i.i.d. samples; each noise vector has norm exactly `noise_level`.
    pub fn sample_dataset<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        count: usize,
        noise_level: f64,
    ) -> Result<Dataset> {
        if count == 0 {
            return Err(invalid("dataset needs at least one sample"));
        }
        if !(noise_level >= 0.0) {
            return Err(invalid("noise level must be nonnegative"));
        }
        let labels = if self.k() == 1 {
            vec![0; count]
        } else {
            let dist = WeightedIndex::new(&self.weights).map_err(|e| invalid(e.to_string()))?;
            (0..count).map(|_| dist.sample(rng)).collect()
        };
        Ok(self.assemble(rng, labels, noise_level))
    }

    /// Exactly `per_component` samples from each component, grouped by component.
    pub fn sample_dataset_balanced<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        per_component: usize,
        noise_level: f64,
    ) -> Result<Dataset> {
        if per_component == 0 {
            return Err(invalid("dataset needs at least one sample"));
        }
        let labels = (0..self.k())
            .flat_map(|k| std::iter::repeat_n(k, per_component))
            .collect();
        Ok(self.assemble(rng, labels, noise_level))
    }

    /// Per-component log-likelihood terms, `log π_k + log N(x; 0, s²UUᵀ + γ²I)`.
    fn component_log_densities(&self, x: &DVector<f64>, st: &ScheduleState) -> Vec<f64> {
        let s2 = st.s * st.s;
        let g2 = st.gamma * st.gamma;
        let n = self.n as f64;
        let xx = x.norm_squared();
        self.bases
            .iter()
            .zip(&self.weights)
            .zip(&self.dims)
            .map(|((u, &pi), &d)| {
                let proj = (u.transpose() * x).norm_squared();
                let quad = (xx - s2 / (s2 + g2) * proj) / g2;
                let logdet = d as f64 * (s2 + g2).ln() + (n - d as f64) * g2.ln();
                pi.ln() - 0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
            })
            .collect()
    }

    pub fn log_pdf_t(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<f64> {
        self.check_dim(x)?;
        st.require_noise()?;
        Ok(log_sum_exp(&self.component_log_densities(x, st)))
    }

    /// Posterior component probabilities `P(k | x_t)`.
    ///
    /// The logits are `φ‖U_kᵀx‖² + log π_k − (d_k/2)·log((s²+γ²)/γ²)`; the last term is
    /// the same for every component when all `d_k` agree and then drops out.
    pub fn posterior_weights(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        st.require_noise()?;
        let ratio = ((st.s * st.s + st.gamma * st.gamma) / (st.gamma * st.gamma)).ln();
        let logits: Vec<f64> = self
            .bases
            .iter()
            .zip(&self.weights)
            .zip(&self.dims)
            .map(|((u, &pi), &d)| {
                st.phi * (u.transpose() * x).norm_squared() + pi.ln() - 0.5 * d as f64 * ratio
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// `Σ_k w_k U_k U_kᵀ x` with posterior weights.
    fn weighted_projection(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        let w = self.posterior_weights(x, st)?;
        let mut acc = DVector::zeros(self.n);
        for (u, wk) in self.bases.iter().zip(w) {
            if wk > 0.0 {
                acc += u * (u.transpose() * x) * wk;
            }
        }
        Ok(acc)
    }

    /// `E[x_0 | x_t = x]`.
    pub fn posterior_mean(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        Ok(self.weighted_projection(x, st)? * st.shrink())
    }

    /// `∇ log p_t(x)`.
    pub fn score(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        let s2 = st.s * st.s;
        let g2 = st.gamma * st.gamma;
        let wp = self.weighted_projection(x, st)?;
        Ok((x - wp * (s2 / (s2 + g2))) * (-1.0 / g2))
    }

    /// Noiseless draws from the data distribution itself, as columns.
    pub fn sample_clean<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
        Ok(self.sample_dataset(rng, count.max(1), 0.0)?.samples.columns(0, count).into_owned())
    }
}

/// `s_t x0 + γ_t ε` with `ε ~ N(0, I)`.
pub fn forward_perturb<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    st: &ScheduleState,
    rng: &mut R,
) -> DVector<f64> {
    let eps = gaussian_vector(rng, x0.len());
    x0 * st.s + eps * st.gamma
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Serialization(format!(
            "{what}: expected {nrows} rows, found {}",
            rows.len()
        )));
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Serialization(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// JSON form of a model. Matrices are stored as arrays of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
    pub bases: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub mutually_orthogonal: bool,
}

/// JSON form of a dataset. `samples` and `noises` are `n × N`, stored as rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub n: usize,
    #[serde(rename = "N")]
    pub count: usize,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub noises: Vec<Vec<f64>>,
    pub coeffs: Vec<Vec<f64>>,
}

impl From<&MoLRGModel> for ModelDoc {
    fn from(m: &MoLRGModel) -> Self {
        Self {
            n: m.n,
            k: m.k(),
            dims: m.dims.clone(),
            weights: m.weights.clone(),
            bases: m.bases.iter().map(rows_of).collect(),
            mutually_orthogonal: m.mutually_orthogonal,
        }
    }
}

impl TryFrom<ModelDoc> for MoLRGModel {
    type Error = Error;
    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.bases.len() != doc.k || doc.dims.len() != doc.k {
            return Err(Error::Serialization("K disagrees with bases or dims".into()));
        }
        let bases = doc
            .bases
            .iter()
            .map(|b| matrix_from_rows(b, doc.n, "basis"))
            .collect::<Result<Vec<_>>>()?;
        if bases.iter().zip(&doc.dims).any(|(b, &d)| b.ncols() != d) {
            return Err(Error::Serialization("basis width disagrees with dims".into()));
        }
        let mut model = MoLRGModel::new(bases, doc.weights)?;
        model.mutually_orthogonal = model.mutually_orthogonal || doc.mutually_orthogonal;
        Ok(model)
    }
}

impl From<&Dataset> for DatasetDoc {
    fn from(d: &Dataset) -> Self {
        Self {
            n: d.n(),
            count: d.len(),
            samples: rows_of(&d.samples),
            labels: d.labels.clone(),
            noises: rows_of(&d.noises),
            coeffs: d.coeffs.iter().map(|a| a.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<DatasetDoc> for Dataset {
    type Error = Error;
    fn try_from(doc: DatasetDoc) -> Result<Self> {
        let samples = matrix_from_rows(&doc.samples, doc.n, "samples")?;
        let noises = matrix_from_rows(&doc.noises, doc.n, "noises")?;
        if samples.ncols() != doc.count
            || noises.ncols() != doc.count
            || doc.labels.len() != doc.count
            || doc.coeffs.len() != doc.count
        {
            return Err(Error::Serialization("column counts disagree".into()));
        }
        Ok(Dataset {
            samples,
            labels: doc.labels,
            noises,
            coeffs: doc.coeffs.into_iter().map(DVector::from_vec).collect(),
        })
    }
}

impl MoLRGModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDoc::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        doc.try_into()
    }
}

impl Dataset {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&DatasetDoc::from(self)).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDoc =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        doc.try_into()
    }
}
