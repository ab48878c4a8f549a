//! Nearest-neighbor generalization score and the train-then-sample curve.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dae::Parameterization;
use crate::error::{invalid, Error, Result};
use crate::experiments::output::fmt_f64;
use crate::experiments::sampler::{reverse_sample, SamplerConfig, ScoreSource};
use crate::experiments::seed::derive_seed;
use crate::molrg::MoLRGModel;
use crate::optim::sgd::{sgd_train, TrainConfig};
use crate::schedule::Schedule;

fn dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.column(i).iter().zip(b.column(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Σ_i min_j ‖a_i − b_j‖`, skipping `j = i` when `same` is set.
fn nn_sum(a: &DMatrix<f64>, b: &DMatrix<f64>, same: bool) -> f64 {
    let mins: Vec<f64> = (0..a.ncols())
        .into_par_iter()
        .map(|i| {
            (0..b.ncols())
                .filter(|&j| !(same && j == i))
                .map(|j| dist(a, i, b, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    // fixed summation order keeps the score independent of the thread count
    mins.iter().sum()
}

/// Nearest-neighbor distance of generated points to the training set, relative to the
/// self-excluded nearest-neighbor distance within a fresh reference draw.
///
/// Zero means every generated point copies a training point; values near one mean the
/// generated set is spread like independent draws.
pub fn gl_score(generated: &DMatrix<f64>, training: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if generated.ncols() < 2 || training.ncols() < 2 || reference.ncols() < 2 {
        return Err(invalid("GL score needs at least two points in every set"));
    }
    let n = generated.nrows();
    if training.nrows() != n || reference.nrows() != n {
        return Err(invalid("GL score sets disagree in dimension"));
    }
    let den = nn_sum(reference, reference, true);
    if !(den > 0.0) {
        return Err(Error::UndefinedScore("reference points have zero nearest-neighbor spread".into()));
    }
    Ok(nn_sum(generated, training, false) / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlPoint {
    pub d_k: usize,
    pub n_k: usize,
    /// `N_k / d_k`.
    pub ratio: f64,
    pub score: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlCurve {
    pub points: Vec<GlPoint>,
    /// Short description of the generating model.
    pub config: String,
}

impl GlCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,score,seed\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", fmt_f64(p.ratio), fmt_f64(p.score), p.seed));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GlCurveConfig {
    pub n: usize,
    pub k: usize,
    pub orth: bool,
    pub d_values: Vec<usize>,
    /// Samples per component, as multiples of `d_k`.
    pub multipliers: Vec<f64>,
    pub seeds: Vec<u64>,
    pub noise: f64,
    pub schedule: Schedule,
    pub train: TrainConfig,
    /// Start SGD from the true bases perturbed by `train.init_perturb` instead of at random.
    pub init_from_truth: bool,
    pub sampler: SamplerConfig,
}

/// One point: fresh model and balanced data, soft-max SGD, reverse sampling of `M = N`
/// points, and the GL score against a fresh reference draw of the same size.
pub fn gl_point(cfg: &GlCurveConfig, d_k: usize, multiplier: f64, seed: u64) -> Result<GlPoint> {
    let n_k = ((multiplier * d_k as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, d_k as u64, n_k as u64, 0));
    let dims = vec![d_k; cfg.k];
    let model = MoLRGModel::random(&mut rng, cfg.n, &dims, cfg.orth)?;
    let data = model.sample_dataset_balanced(&mut rng, n_k, cfg.noise)?;
    let mut train = cfg.train.clone();
    train.seed = derive_seed(seed, d_k as u64, n_k as u64, 1);
    let init = cfg.init_from_truth.then_some(&model);
    let fit = sgd_train(&data, &cfg.schedule, &train, init, &dims, Parameterization::Softmax)?;
    let m = data.len();
    let generated = reverse_sample(&ScoreSource::Learned(&fit.params), &cfg.schedule, &cfg.sampler, cfg.n, m, &mut rng)?;
    let reference = model.sample_clean(&mut rng, m)?;
    let score = gl_score(&generated, &data.samples, &reference)?;
    Ok(GlPoint { d_k, n_k, ratio: n_k as f64 / d_k as f64, score, seed })
}

/// GL score over every `(d_k, multiplier, seed)` combination, in that nesting order.
pub fn gl_curve(cfg: &GlCurveConfig) -> Result<GlCurve> {
    let mut jobs = Vec::new();
    for &d in &cfg.d_values {
        for &r in &cfg.multipliers {
            for &s in &cfg.seeds {
                jobs.push((d, r, s));
            }
        }
    }
    let points = jobs
        .into_par_iter()
        .map(|(d, r, s)| gl_point(cfg, d, r, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(GlCurve {
        points,
        config: format!("K={} n={} orth={} noise={}", cfg.k, cfg.n, cfg.orth, cfg.noise),
    })
}
