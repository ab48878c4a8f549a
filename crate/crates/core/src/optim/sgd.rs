//! Minibatch SGD on the denoising loss with a QR retraction onto orthonormal bases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dae::{hardmax_index, DaeParams, Parameterization};
use crate::error::{invalid, Error, Result};
use crate::linalg::{
    gaussian_matrix, hcat, hsplit, orthonormalize, random_orthonormal, softmax,
};
use crate::molrg::{Dataset, MoLRGModel};
use crate::schedule::{time_grid, Schedule, ScheduleState, DEFAULT_TIME_STEPS};

/// How the Gaussian noise is drawn inside one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// One `ε` reused by every pair of the minibatch.
    Shared,
    /// A fresh `ε` per pair.
    PerSample,
}

impl std::str::FromStr for NoiseSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" => Ok(Self::Shared),
            "per_sample" | "per-sample" => Ok(Self::PerSample),
            _ => Err(invalid(format!("unknown noise sharing `{s}`"))),
        }
    }
}

impl std::fmt::Display for NoiseSharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Shared => "shared",
            Self::PerSample => "per_sample",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch: usize,
    pub iters: usize,
    pub time_steps: usize,
    pub init_perturb: f64,
    pub seed: u64,
    pub noise: NoiseSharing,
    /// Record a trace row every this many iterations (the first and last are always kept).
    pub log_every: usize,
}

impl TrainConfig {
    /// Single-subspace settings: learning rate 1e-4, batch `128·N_k`, `10⁴` iterations.
    pub fn single_defaults(n_k: usize) -> Self {
        Self {
            learning_rate: 1e-4,
            batch: 128 * n_k.max(1),
            iters: 10_000,
            time_steps: DEFAULT_TIME_STEPS,
            init_perturb: 0.2,
            seed: 0,
            noise: NoiseSharing::Shared,
            log_every: 100,
        }
    }

    /// Two-component settings: learning rate 2e-5, batch 1024, `10⁵` iterations.
    pub fn mixture_defaults() -> Self {
        Self {
            learning_rate: 2e-5,
            batch: 1024,
            iters: 100_000,
            time_steps: DEFAULT_TIME_STEPS,
            init_perturb: 0.2,
            seed: 0,
            noise: NoiseSharing::Shared,
            log_every: 1000,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch == 0 || self.time_steps == 0 || self.log_every == 0 {
            return Err(invalid("batch, time_steps and log_every must be positive"));
        }
        if !(self.init_perturb >= 0.0) {
            return Err(invalid("init_perturb must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Weighted minibatch loss at the parameters before the step.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DaeParams,
    pub trace: Vec<TraceRow>,
}

/// One minibatch: sample indices, grid-time indices and the noise.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub times: Vec<usize>,
    /// One column when shared, `M` columns otherwise.
    pub noise: DMatrix<f64>,
}

impl Minibatch {
    fn eps(&self, m: usize) -> nalgebra::DVectorView<'_, f64> {
        if self.noise.ncols() == 1 {
            self.noise.column(0)
        } else {
            self.noise.column(m)
        }
    }
}

/// Precomputed per-grid-time scalars used by the gradient.
#[derive(Debug, Clone)]
pub struct GridWeights {
    pub states: Vec<ScheduleState>,
    /// `λ_t` divided by its grid mean; a positive rescaling leaves the minimizer unchanged.
    pub lambda: Vec<f64>,
}

impl GridWeights {
    pub fn new(schedule: &Schedule, time_steps: usize) -> Result<Self> {
        let states = time_grid(time_steps)?
            .into_iter()
            .map(|t| schedule.eval(t))
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<f64> = states.iter().map(|st| schedule.weight_at(st)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let lambda = raw.iter().map(|l| l / mean).collect();
        Ok(Self { states, lambda })
    }
}

fn draw_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize, steps: usize, batch: usize, noise: NoiseSharing) -> Minibatch {
    let mut indices = Vec::with_capacity(batch);
    let mut times = Vec::with_capacity(batch);
    for _ in 0..batch {
        indices.push(rng.random_range(0..count));
        times.push(rng.random_range(0..steps));
    }
    let cols = match noise {
        NoiseSharing::Shared => 1,
        NoiseSharing::PerSample => batch,
    };
    Minibatch {
        indices,
        times,
        noise: gaussian_matrix(rng, n, cols),
    }
}

/// Loss and gradient of `(1/M) Σ_m λ_m ‖x_θ(s x_m + γ ε_m) − x_m‖²`, one sample at a time.
pub fn batch_gradient_naive(
    params: &DaeParams,
    kind: Parameterization,
    data: &Dataset,
    grid: &GridWeights,
    batch: &Minibatch,
) -> (f64, Vec<DMatrix<f64>>) {
    let bases = params.bases();
    let mut grads: Vec<DMatrix<f64>> = bases.iter().map(|u| DMatrix::zeros(u.nrows(), u.ncols())).collect();
    let mut loss = 0.0;
    let hard: Vec<usize> = match kind {
        Parameterization::Hardmax => (0..data.len()).map(|i| hardmax_index(params, &data.sample(i))).collect(),
        _ => Vec::new(),
    };
    for m in 0..batch.indices.len() {
        let i = batch.indices[m];
        let st = &grid.states[batch.times[m]];
        let lam = grid.lambda[batch.times[m]];
        let x = data.samples.column(i);
        let y: DVector<f64> = x * st.s + batch.eps(m) * st.gamma;
        let c = st.shrink();
        match kind {
            Parameterization::Single | Parameterization::Hardmax => {
                let k = if kind == Parameterization::Single { 0 } else { hard[i] };
                let u = &bases[k];
                let z = u.transpose() * &y;
                let r = u * &z * c - x;
                loss += lam * r.norm_squared();
                let ur = u.transpose() * &r;
                grads[k] += (&r * z.transpose() + &y * ur.transpose()) * (2.0 * lam * c);
            }
            Parameterization::Softmax => {
                let zs: Vec<DVector<f64>> = bases.iter().map(|u| u.transpose() * &y).collect();
                let logits: Vec<f64> = zs.iter().map(|z| st.phi * z.norm_squared()).collect();
                let w = softmax(&logits);
                let mut out = DVector::zeros(y.len());
                for (k, u) in bases.iter().enumerate() {
                    out += u * &zs[k] * w[k];
                }
                let r = out * c - x;
                loss += lam * r.norm_squared();
                let q = &r * (2.0 * lam * c);
                let uq: Vec<DVector<f64>> = bases.iter().map(|u| u.transpose() * &q).collect();
                let alpha: Vec<f64> = zs.iter().zip(&uq).map(|(z, a)| z.dot(a)).collect();
                let mean_alpha: f64 = w.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                for k in 0..bases.len() {
                    if w[k] == 0.0 {
                        continue;
                    }
                    grads[k] += (&q * zs[k].transpose() + &y * uq[k].transpose()) * w[k];
                    grads[k] += &y * zs[k].transpose() * (w[k] * (alpha[k] - mean_alpha) * 2.0 * st.phi);
                }
            }
        }
    }
    let scale = 1.0 / batch.indices.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    (loss * scale, grads)
}

/// Same quantity as [`batch_gradient_naive`] for the linear denoisers with one shared `ε`,
/// assembled from per-sample sums so the cost does not grow with the batch size.
pub fn batch_gradient_shared(
    params: &DaeParams,
    kind: Parameterization,
    data: &Dataset,
    grid: &GridWeights,
    batch: &Minibatch,
) -> (f64, Vec<DMatrix<f64>>) {
    debug_assert!(kind != Parameterization::Softmax && batch.noise.ncols() == 1);
    let bases = params.bases();
    let count = data.len();
    let eps = batch.noise.column(0).into_owned();
    // per-sample sums of λc²s², λc²sγ, λcs, λcγ and λ
    let mut a = vec![0.0; count];
    let mut b = vec![0.0; count];
    let mut e = vec![0.0; count];
    let mut f = vec![0.0; count];
    let mut g = vec![0.0; count];
    let mut cgg = vec![0.0; bases.len()];
    let assign: Vec<usize> = match kind {
        Parameterization::Hardmax => (0..count).map(|i| hardmax_index(params, &data.sample(i))).collect(),
        _ => vec![0; count],
    };
    for m in 0..batch.indices.len() {
        let i = batch.indices[m];
        let st = &grid.states[batch.times[m]];
        let lam = grid.lambda[batch.times[m]];
        let c = st.shrink();
        a[i] += lam * c * c * st.s * st.s;
        b[i] += lam * c * c * st.s * st.gamma;
        e[i] += lam * c * st.s;
        f[i] += lam * c * st.gamma;
        g[i] += lam;
        cgg[assign[i]] += lam * c * c * st.gamma * st.gamma;
    }
    let scale = 1.0 / batch.indices.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(bases.len());
    for (k, u) in bases.iter().enumerate() {
        let n = u.nrows();
        let mut xa = DMatrix::zeros(n, count);
        let mut xe = DMatrix::zeros(n, count);
        let mut xb = DVector::zeros(n);
        let mut xf = DVector::zeros(n);
        let mut signal = 0.0;
        for i in 0..count {
            if assign[i] != k || g[i] == 0.0 {
                continue;
            }
            let x = data.samples.column(i);
            xa.set_column(i, &(x * a[i]));
            xe.set_column(i, &(x * e[i]));
            xb += x * b[i];
            xf += x * f[i];
            signal += g[i] * x.norm_squared();
        }
        // S = Σ λc² y yᵀ and T = Σ λc x yᵀ restricted to component k
        let s_mat = &xa * data.samples.transpose()
            + &xb * eps.transpose()
            + &eps * xb.transpose()
            + &eps * eps.transpose() * cgg[k];
        let t_mat = &xe * data.samples.transpose() + &xf * eps.transpose();
        let su = &s_mat * u;
        let tu = &t_mat * u;
        let ttu = t_mat.transpose() * u;
        let usu = u.transpose() * &su;
        let utu = u.transpose() * &tu;
        loss += usu.trace() - 2.0 * utu.trace() + signal;
        let grad = (u * (u.transpose() * &su) + &su - tu - ttu) * (2.0 * scale);
        grads.push(grad);
    }
    (loss * scale, grads)
}

/// QR retraction. Multi-component parameters are retracted jointly when they fit in `n`.
pub fn retract(bases: Vec<DMatrix<f64>>) -> Vec<DMatrix<f64>> {
    let n = bases[0].nrows();
    let dims: Vec<usize> = bases.iter().map(|u| u.ncols()).collect();
    if bases.len() > 1 && dims.iter().sum::<usize>() <= n {
        hsplit(&orthonormalize(&hcat(&bases)), &dims)
    } else {
        bases.iter().map(orthonormalize).collect()
    }
}

fn initial_params<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    dims: &[usize],
    init_model: Option<&MoLRGModel>,
    perturb: f64,
) -> Result<DaeParams> {
    let bases = match init_model {
        Some(model) => {
            if model.dims() != dims || model.n() != n {
                return Err(invalid("initialization model disagrees with dims"));
            }
            // one Δ shared by every component, sliced to each width
            let width = dims.iter().copied().max().unwrap_or(0);
            let delta = gaussian_matrix(rng, n, width);
            model
                .bases()
                .iter()
                .map(|u| orthonormalize(&(u + delta.columns(0, u.ncols()) * perturb)))
                .collect()
        }
        None => {
            let total: usize = dims.iter().sum();
            if dims.len() > 1 && total <= n {
                hsplit(&random_orthonormal(rng, n, total), dims)
            } else {
                dims.iter().map(|&d| random_orthonormal(rng, n, d)).collect()
            }
        }
    };
    DaeParams::new(retract(bases))
}

/// Runs SGD and reports every recorded trace row to `observer` as it is produced.
pub fn sgd_train_observed(
    dataset: &Dataset,
    schedule: &Schedule,
    config: &TrainConfig,
    init_model: Option<&MoLRGModel>,
    dims: &[usize],
    kind: Parameterization,
    observer: &mut dyn FnMut(&TraceRow, &DaeParams),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0 || d > dataset.n()) {
        return Err(invalid(format!("dims {dims:?} invalid for n = {}", dataset.n())));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if kind == Parameterization::Single && dims.len() != 1 {
        return Err(invalid("the single-subspace denoiser takes exactly one basis"));
    }
    let n = dataset.n();
    let grid = GridWeights::new(schedule, config.time_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial_params(&mut rng, n, dims, init_model, config.init_perturb)?;
    let mut trace = Vec::new();
    let fast = kind != Parameterization::Softmax && config.noise == NoiseSharing::Shared;

    for iter in 0..=config.iters {
        let batch = draw_batch(&mut rng, n, dataset.len(), config.time_steps, config.batch, config.noise);
        let (loss, grads) = if fast {
            batch_gradient_shared(&params, kind, dataset, &grid, &batch)
        } else {
            batch_gradient_naive(&params, kind, dataset, &grid, &batch)
        };
        let grad_norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        let row = TraceRow { iter, loss, grad_norm };
        let last = iter == config.iters;
        if iter % config.log_every == 0 || last {
            observer(&row, &params);
            trace.push(row);
        }
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingDiverged { iter });
        }
        if last {
            break;
        }
        let stepped: Vec<DMatrix<f64>> = params
            .bases()
            .iter()
            .zip(&grads)
            .map(|(u, g)| u - g * config.learning_rate)
            .collect();
        if stepped.iter().any(|u| u.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingDiverged { iter });
        }
        params = DaeParams::new(retract(stepped)).map_err(|_| Error::TrainingDiverged { iter })?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Plain SGD on the empirical loss (see [`sgd_train_observed`]).
pub fn sgd_train(
    dataset: &Dataset,
    schedule: &Schedule,
    config: &TrainConfig,
    init_model: Option<&MoLRGModel>,
    dims: &[usize],
    kind: Parameterization,
) -> Result<TrainOutcome> {
    sgd_train_observed(dataset, schedule, config, init_model, dims, kind, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_error;
    use crate::optim::oracle::pca_oracle;
    use crate::optim::subspace_distance;
    use crate::schedule::Weighting;

    fn fixture(seed: u64, dims: &[usize], n: usize, count: usize) -> (MoLRGModel, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MoLRGModel::random(&mut rng, n, dims, true).unwrap();
        let ds = model.sample_dataset(&mut rng, count, 0.0).unwrap();
        (model, ds)
    }

    fn assert_grads_close(a: &(f64, Vec<DMatrix<f64>>), b: &(f64, Vec<DMatrix<f64>>)) {
        assert!((a.0 - b.0).abs() <= 1e-10 * a.0.abs().max(1.0), "{} vs {}", a.0, b.0);
        for (ga, gb) in a.1.iter().zip(&b.1) {
            assert!((ga - gb).norm() <= 1e-10 * ga.norm().max(1.0));
        }
    }

    #[test]
    fn shared_noise_gradient_matches_per_sample_sum() {
        for (kind, dims) in [(Parameterization::Single, vec![3]), (Parameterization::Hardmax, vec![2, 3])] {
            let (_, ds) = fixture(1, &dims, 9, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let params = initial_params(&mut rng, 9, &dims, None, 0.0).unwrap();
            let sch = Schedule::vp(0.1, 20.0).unwrap().with_weighting(Weighting::Snr);
            let grid = GridWeights::new(&sch, 16).unwrap();
            let batch = draw_batch(&mut rng, 9, 12, 16, 50, NoiseSharing::Shared);
            assert_grads_close(
                &batch_gradient_shared(&params, kind, &ds, &grid, &batch),
                &batch_gradient_naive(&params, kind, &ds, &grid, &batch),
            );
        }
    }

    /// Central differences of the minibatch loss through an unconstrained basis.
    fn fd_gradient(params: &DaeParams, kind: Parameterization, ds: &Dataset, grid: &GridWeights, batch: &Minibatch) -> Vec<DMatrix<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for k in 0..params.k() {
            let u = &params.bases()[k];
            let mut g = DMatrix::zeros(u.nrows(), u.ncols());
            for idx in 0..u.len() {
                let eval = |delta: f64| {
                    let mut bases = params.bases().to_vec();
                    bases[k][idx] += delta;
                    unconstrained_loss(&bases, kind, ds, grid, batch)
                };
                g[idx] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn unconstrained_loss(bases: &[DMatrix<f64>], kind: Parameterization, ds: &Dataset, grid: &GridWeights, batch: &Minibatch) -> f64 {
        let mut total = 0.0;
        for m in 0..batch.indices.len() {
            let i = batch.indices[m];
            let st = &grid.states[batch.times[m]];
            let x = ds.samples.column(i);
            let y: DVector<f64> = x * st.s + batch.eps(m) * st.gamma;
            let out = match kind {
                Parameterization::Softmax => {
                    let logits: Vec<f64> = bases.iter().map(|u| st.phi * (u.transpose() * &y).norm_squared()).collect();
                    let w = softmax(&logits);
                    bases.iter().zip(w).fold(DVector::zeros(y.len()), |acc, (u, wk)| acc + u * (u.transpose() * &y) * wk)
                }
                _ => &bases[0] * (bases[0].transpose() * &y),
            } * st.shrink();
            total += grid.lambda[batch.times[m]] * (out - x).norm_squared();
        }
        total / batch.indices.len() as f64
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for (kind, dims) in [(Parameterization::Single, vec![2]), (Parameterization::Softmax, vec![2, 2])] {
            let (_, ds) = fixture(3, &dims, 6, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let params = initial_params(&mut rng, 6, &dims, None, 0.0).unwrap();
            let grid = GridWeights::new(&Schedule::default(), 8).unwrap();
            let batch = draw_batch(&mut rng, 6, 5, 8, 7, NoiseSharing::PerSample);
            let (_, g) = batch_gradient_naive(&params, kind, &ds, &grid, &batch);
            let fd = fd_gradient(&params, kind, &ds, &grid, &batch);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).amax() < 1e-6, "{kind}: {}", (a - b).amax());
            }
        }
    }

    #[test]
    fn every_step_stays_orthonormal() {
        let (model, ds) = fixture(5, &[3, 3], 12, 20);
        let mut cfg = TrainConfig::mixture_defaults();
        cfg.iters = 50;
        cfg.batch = 32;
        cfg.log_every = 1;
        cfg.learning_rate = 1e-2;
        let mut worst: f64 = 0.0;
        let out = sgd_train_observed(&ds, &Schedule::default(), &cfg, Some(&model), &[3, 3], Parameterization::Softmax, &mut |_, p| {
            worst = worst.max(orthonormality_error(&p.concatenated()));
        })
        .unwrap();
        assert!(worst <= 1e-8);
        assert!(out.params.joint_orthonormal());
        assert_eq!(out.trace.len(), 51);
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let (model, ds) = fixture(6, &[2, 2], 8, 10);
        let mut cfg = TrainConfig::mixture_defaults();
        cfg.iters = 0;
        let a = sgd_train(&ds, &Schedule::default(), &cfg, Some(&model), &[2, 2], Parameterization::Softmax).unwrap();
        assert_eq!(a.trace.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = initial_params(&mut rng, 8, &[2, 2], Some(&model), 0.2).unwrap();
        assert_eq!(a.params, init);
    }

    #[test]
    fn divergence_is_reported() {
        let (_, mut ds) = fixture(7, &[2], 6, 4);
        ds.samples[(0, 0)] = f64::NAN;
        let mut cfg = TrainConfig::single_defaults(4);
        cfg.iters = 10;
        let r = sgd_train(&ds, &Schedule::default(), &cfg, None, &[2], Parameterization::Single);
        assert!(matches!(r, Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn per_sample_noise_with_larger_steps_reaches_pca() {
        let (_, ds) = fixture(8, &[3], 20, 50);
        let mut cfg = TrainConfig::single_defaults(50);
        cfg.noise = NoiseSharing::PerSample;
        cfg.learning_rate = 1e-2;
        cfg.batch = 1024;
        cfg.iters = 3000;
        let out = sgd_train(&ds, &Schedule::default(), &cfg, None, &[3], Parameterization::Single).unwrap();
        let pca = pca_oracle(&ds.samples, 3).unwrap();
        let dist = subspace_distance(&out.params.bases()[0], &pca).unwrap();
        assert!(dist <= 1e-2, "{dist}");
    }

    #[test]
    fn minimizer_does_not_depend_on_the_weighting() {
        let (_, ds) = fixture(9, &[3], 20, 50);
        let mut cfg = TrainConfig::single_defaults(50);
        cfg.noise = NoiseSharing::PerSample;
        cfg.learning_rate = 5e-3;
        cfg.batch = 256;
        cfg.iters = 3000;
        let run = |w| {
            sgd_train(&ds, &Schedule::default().with_weighting(w), &cfg, None, &[3], Parameterization::Single)
                .unwrap()
                .params
        };
        let a = run(Weighting::Unit);
        let b = run(Weighting::Snr);
        assert!(subspace_distance(&a.bases()[0], &b.bases()[0]).unwrap() <= 2e-2);
    }
}
