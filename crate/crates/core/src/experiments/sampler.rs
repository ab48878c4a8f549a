//! Reverse-time sampling with the probability-flow ODE and a second-order Heun integrator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dae::{dae_softmax, DaeParams};
use crate::error::{invalid, Error, Result};
use crate::linalg::gaussian_matrix;
use crate::molrg::MoLRGModel;
use crate::schedule::{Schedule, ScheduleState};

/// Where the score comes from.
#[derive(Clone, Copy)]
pub enum ScoreSource<'a> {
    /// Exact score of the mixture.
    GroundTruth(&'a MoLRGModel),
    /// Tweedie score `(s·x̂₀ − x)/γ²` of a learned denoiser.
    ///
    /// Hard-max parameters are also sampled through the soft-max weights, since the hard-max
    /// gate needs the clean sample.
    Learned(&'a DaeParams),
    /// Arbitrary score function.
    Custom(&'a (dyn Fn(&DVector<f64>, &ScheduleState) -> Result<DVector<f64>> + Sync)),
}

impl ScoreSource<'_> {
    pub fn score(&self, x: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        match self {
            Self::GroundTruth(model) => model.score(x, st),
            Self::Learned(params) => {
                st.require_noise()?;
                let x0 = dae_softmax(params, x, st)?;
                Ok((x0 * st.s - x) / (st.gamma * st.gamma))
            }
            Self::Custom(f) => f(x, st),
        }
    }

    /// Ambient dimension, when the source knows it.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::GroundTruth(model) => Some(model.n()),
            Self::Learned(params) => Some(params.n()),
            Self::Custom(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Number of Heun intervals.
    pub steps: usize,
    /// Noise level at which integration stops.
    pub sigma_end: f64,
    /// Exponent of the noise-level spacing; larger values crowd nodes toward small noise.
    pub rho: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 18, sigma_end: 0.002, rho: 7.0 }
    }
}

impl SamplerConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Decreasing integration times from `t_start` to the time of `sigma_end`.
    ///
    /// Nodes are evenly spaced in `σ^{1/ρ}` and mapped back through the schedule.
    pub fn nodes(&self, schedule: &Schedule, t_start: f64) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(self.rho > 0.0) {
            return Err(invalid("rho must be positive"));
        }
        let (_, sigma_hi) = schedule.scale_and_sigma(t_start);
        let sigma_lo = self.sigma_end.max(schedule.sigma_min);
        if !(sigma_lo > 0.0) || !(sigma_hi > sigma_lo) {
            return Err(invalid(format!(
                "cannot integrate from sigma {sigma_hi} down to {sigma_lo}"
            )));
        }
        let (a, b) = (sigma_hi.powf(1.0 / self.rho), sigma_lo.powf(1.0 / self.rho));
        let mut nodes: Vec<f64> = (0..=self.steps)
            .map(|i| {
                let f = i as f64 / self.steps as f64;
                schedule.time_for_sigma((a + f * (b - a)).powf(self.rho))
            })
            .collect();
        nodes[0] = t_start;
        Ok(nodes)
    }
}

fn velocity(
    source: &ScoreSource,
    schedule: &Schedule,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let st = schedule.eval(t)?;
    let score = source.score(x, &st)?;
    Ok(x * schedule.drift(t) - score * (0.5 * schedule.diffusion_sq(t)))
}

/// Integrates the probability-flow ODE from `(x_start, t_start)` down to the end noise level.
pub fn reverse_from(
    source: &ScoreSource,
    schedule: &Schedule,
    config: &SamplerConfig,
    x_start: &DVector<f64>,
    t_start: f64,
) -> Result<DVector<f64>> {
    let nodes = config.nodes(schedule, t_start)?;
    let mut x = x_start.clone();
    for (step, pair) in nodes.windows(2).enumerate() {
        let (t0, t1) = (pair[0], pair[1]);
        let h = t1 - t0;
        let v0 = velocity(source, schedule, &x, t0)?;
        let euler = &x + &v0 * h;
        let v1 = velocity(source, schedule, &euler, t1)?;
        x += (v0 + v1) * (0.5 * h);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverDiverged { step });
        }
    }
    Ok(x)
}

/// Draws `count` samples starting from `N(0, (s₁² + γ₁²) I)` at `t = 1`.
pub fn reverse_sample<R: Rng + ?Sized>(
    source: &ScoreSource,
    schedule: &Schedule,
    config: &SamplerConfig,
    n: usize,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if let Some(dim) = source.dim() {
        if dim != n {
            return Err(invalid(format!("score source has dimension {dim}, asked for {n}")));
        }
    }
    let st = schedule.eval(1.0)?;
    let scale = (st.s * st.s + st.gamma * st.gamma).sqrt();
    let start = gaussian_matrix(rng, n, count) * scale;
    let mut out = DMatrix::zeros(n, count);
    for i in 0..count {
        let x = reverse_from(source, schedule, config, &start.column(i).into_owned(), 1.0)?;
        out.set_column(i, &x);
    }
    Ok(out)
}
