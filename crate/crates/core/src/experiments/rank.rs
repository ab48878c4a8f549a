//! Numerical rank of the denoiser Jacobian along forward trajectories.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dae::{jacobian_analytic_gt, jacobian_analytic_softmax, numerical_rank, DaeParams, RankReport};
use crate::error::{invalid, Result};
use crate::linalg::gaussian_vector;
use crate::molrg::MoLRGModel;
use crate::schedule::{time_grid, Schedule, ScheduleState};

/// A denoiser whose Jacobian is available in closed form.
#[derive(Clone, Copy)]
pub enum JacobianSource<'a> {
    GroundTruth(&'a MoLRGModel),
    Learned(&'a DaeParams),
}

impl JacobianSource<'_> {
    pub fn n(&self) -> usize {
        match self {
            Self::GroundTruth(m) => m.n(),
            Self::Learned(p) => p.n(),
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DMatrix<f64>> {
        match self {
            Self::GroundTruth(m) => jacobian_analytic_gt(m, x, st),
            Self::Learned(p) => jacobian_analytic_softmax(p, x, st),
        }
    }

    pub fn denoise(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        match self {
            Self::GroundTruth(m) => m.posterior_mean(x, st),
            Self::Learned(p) => crate::dae::dae_softmax(p, x, st),
        }
    }
}

/// Rank reports for `trajectories` noise draws, each evaluated at every grid time.
///
/// Row `r` of the result holds trajectory `r`, ordered by increasing `t`.
pub fn rank_vs_snr<R: Rng + ?Sized>(
    source: &JacobianSource,
    x0: &DVector<f64>,
    schedule: &Schedule,
    time_steps: usize,
    trajectories: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<RankReport>>> {
    if x0.len() != source.n() {
        return Err(invalid("x0 has the wrong dimension"));
    }
    let times = time_grid(time_steps)?;
    let states: Vec<ScheduleState> = times.iter().map(|&t| schedule.eval(t)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(trajectories);
    for _ in 0..trajectories {
        // one ε per trajectory, shared by every time
        let eps = gaussian_vector(rng, x0.len());
        let row = states
            .iter()
            .map(|st| {
                let xt = x0 * st.s + &eps * st.gamma;
                Ok(numerical_rank(&source.jacobian(&xt, st)?, eta)?.at(st))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Mean rank over trajectories at each grid time.
pub fn mean_rank_by_time(reports: &[Vec<RankReport>]) -> Vec<(f64, f64)> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|j| {
            let mean = reports.iter().map(|r| r[j].numerical_rank as f64).sum::<f64>() / reports.len() as f64;
            (first[j].t, mean)
        })
        .collect()
}
