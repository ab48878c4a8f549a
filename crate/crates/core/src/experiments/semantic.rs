//! Sweeps along singular vectors of the denoiser Jacobian.

use nalgebra::DVector;
use rand::Rng;

use crate::dae::numerical_rank;
use crate::error::{Error, Result};
use crate::experiments::rank::JacobianSource;
use crate::experiments::sampler::{reverse_from, SamplerConfig, ScoreSource};
use crate::linalg::{gaussian_vector, left_singular};
use crate::schedule::Schedule;

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    /// Right singular vector `v_i` used for the sweep.
    pub direction: DVector<f64>,
    /// Random unit direction used for the control sweep.
    pub control_direction: DVector<f64>,
    pub samples: Vec<DVector<f64>>,
    pub control_samples: Vec<DVector<f64>>,
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
}

fn score_source<'a>(src: &JacobianSource<'a>) -> ScoreSource<'a> {
    match *src {
        JacobianSource::GroundTruth(m) => ScoreSource::GroundTruth(m),
        JacobianSource::Learned(p) => ScoreSource::Learned(p),
    }
}

/// Perturbs `x_t` along the `index`-th (1-based) right singular vector of the Jacobian at
/// `(x_t, t)` by each `α` and finishes the reverse ODE from there.
///
/// The control sweep uses a random unit direction drawn from `rng` and the same `α` values.
#[allow(clippy::too_many_arguments)]
pub fn semantic_sweep<R: Rng + ?Sized>(
    source: &JacobianSource,
    x_t: &DVector<f64>,
    t: f64,
    schedule: &Schedule,
    sampler: &SamplerConfig,
    index: usize,
    alphas: &[f64],
    eta: f64,
    rng: &mut R,
) -> Result<SweepResult> {
    let st = schedule.eval(t)?;
    let jac = source.jacobian(x_t, &st)?;
    let report = numerical_rank(&jac, eta)?;
    if index == 0 || index > report.numerical_rank {
        return Err(Error::InvalidIndex { index, rank: report.numerical_rank });
    }
    // right singular vectors of J are the left ones of Jᵀ
    let (v, _) = left_singular(&jac.transpose());
    let direction = v.column(index - 1).into_owned();

    let mut control = gaussian_vector(rng, x_t.len());
    control /= control.norm();

    let score = score_source(source);
    let run = |dir: &DVector<f64>| -> Result<Vec<DVector<f64>>> {
        alphas
            .iter()
            .map(|&a| {
                let start = if a == 0.0 { x_t.clone() } else { x_t + dir * a };
                reverse_from(&score, schedule, sampler, &start, t)
            })
            .collect()
    };
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        samples: run(&direction)?,
        control_samples: run(&control)?,
        direction,
        control_direction: control,
        singular_values: report.singular_values,
        numerical_rank: report.numerical_rank,
    })
}

/// `(‖U₁ᵀx‖² − ‖U₂ᵀx‖²)/(‖U₁ᵀx‖² + ‖U₂ᵀx‖²)` for the first two bases.
pub fn energy_split(bases: &[nalgebra::DMatrix<f64>], x: &DVector<f64>) -> f64 {
    let e1 = (bases[0].transpose() * x).norm_squared();
    let e2 = (bases[1].transpose() * x).norm_squared();
    (e1 - e2) / (e1 + e2)
}
