//! Empirical denoising loss: Monte-Carlo, closed form for the single-subspace denoiser,
//! and the equivalent score-matching objective.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dae::{dae_hardmax, dae_single, dae_softmax, DaeParams, Parameterization};
use crate::error::{invalid, Error, Result};
use crate::linalg::gaussian_vector;
use crate::molrg::{Dataset, MoLRGModel};
use crate::schedule::{time_grid, Schedule, ScheduleState};

/// Anything that maps a noisy `x_t` to an estimate of `x_0`.
///
/// `x0` is the clean sample the noisy one was built from; only the hard-max denoiser reads it.
pub trait Denoiser: Sync {
    fn denoise(&self, xt: &DVector<f64>, x0: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>>;
}

/// Learned bases together with the way they are combined.
#[derive(Debug, Clone, Copy)]
pub struct Trained<'a> {
    pub params: &'a DaeParams,
    pub kind: Parameterization,
}

impl Denoiser for Trained<'_> {
    fn denoise(&self, xt: &DVector<f64>, x0: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        match self.kind {
            Parameterization::Single => dae_single(&self.params.bases()[0], xt, st),
            Parameterization::Softmax => dae_softmax(self.params, xt, st),
            Parameterization::Hardmax => dae_hardmax(self.params, x0, xt, st),
        }
    }
}

/// The ground-truth posterior mean.
impl Denoiser for MoLRGModel {
    fn denoise(&self, xt: &DVector<f64>, _x0: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        self.posterior_mean(xt, st)
    }
}

impl<F> Denoiser for F
where
    F: Fn(&DVector<f64>, &DVector<f64>, &ScheduleState) -> Result<DVector<f64>> + Sync,
{
    fn denoise(&self, xt: &DVector<f64>, x0: &DVector<f64>, st: &ScheduleState) -> Result<DVector<f64>> {
        self(xt, x0, st)
    }
}

/// A Monte-Carlo value with its estimated standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Walks `(i, t, ε)` in a fixed order: samples outermost, then grid times, then draws.
///
/// `term` returns the already weighted squared error for one draw.
fn mc_sweep<R, T>(
    dataset: &Dataset,
    schedule: &Schedule,
    time_steps: usize,
    mc_draws: usize,
    rng: &mut R,
    mut term: T,
) -> Result<McEstimate>
where
    R: Rng + ?Sized,
    T: FnMut(&DVector<f64>, &DVector<f64>, &DVector<f64>, &ScheduleState) -> Result<f64>,
{
    if mc_draws == 0 {
        return Err(invalid("need at least one Monte-Carlo draw"));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let grid = time_grid(time_steps)?;
    let states = grid.iter().map(|&t| schedule.eval(t)).collect::<Result<Vec<_>>>()?;
    let coef = 1.0 / (time_steps as f64 * dataset.len() as f64);
    let m = mc_draws as f64;
    let mut value = 0.0;
    let mut var = 0.0;
    for i in 0..dataset.len() {
        let x0 = dataset.sample(i);
        for st in &states {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..mc_draws {
                let eps = gaussian_vector(rng, x0.len());
                let xt = &x0 * st.s + &eps * st.gamma;
                let v = term(&x0, &xt, &eps, st)?;
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / m;
            value += coef * mean;
            if mc_draws > 1 {
                let cell_var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
                var += coef * coef * cell_var / m;
            }
        }
    }
    Ok(McEstimate {
        value,
        std_error: var.sqrt(),
    })
}

/// `(1/N) Σ_i Σ_t Δt λ_t E_ε ‖x_θ(s_t x_i + γ_t ε, t) − x_i‖²` by Monte Carlo.
pub fn loss_mc<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    dataset: &Dataset,
    schedule: &Schedule,
    time_steps: usize,
    mc_draws: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    mc_sweep(dataset, schedule, time_steps, mc_draws, rng, |x0, xt, _eps, st| {
        let out = denoiser.denoise(xt, x0, st)?;
        Ok(schedule.weight_at(st) * (out - x0).norm_squared())
    })
}

/// Denoising score matching with `s_θ = (s x_θ − x_t)/γ²` and weight `ξ_t = s²σ⁴λ_t`.
///
/// Consumes the generator exactly like [`loss_mc`], so both agree draw for draw.
pub fn score_matching_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    dataset: &Dataset,
    schedule: &Schedule,
    time_steps: usize,
    mc_draws: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    mc_sweep(dataset, schedule, time_steps, mc_draws, rng, |x0, xt, _eps, st| {
        let g2 = st.gamma * st.gamma;
        let xi = st.s * st.s * st.sigma.powi(4) * schedule.weight_at(st);
        let out = denoiser.denoise(xt, x0, st)?;
        let model_score = (out * st.s - xt) / g2;
        let target = (x0 * st.s - xt) / g2;
        Ok(xi * (model_score - target).norm_squared())
    })
}

/// Exact expectation of the loss for the single-subspace denoiser when `s_t ≡ 1`.
pub fn loss_closed_single(
    u: &DMatrix<f64>,
    dataset: &Dataset,
    schedule: &Schedule,
    time_steps: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if u.nrows() != dataset.n() {
        return Err(invalid("basis and data dimensions differ"));
    }
    let grid = time_grid(time_steps)?;
    let d = u.ncols() as f64;
    let proj = u.transpose() * &dataset.samples;
    let mut total = 0.0;
    for &t in &grid {
        let st = schedule.eval(t)?;
        if st.s != 1.0 {
            return Err(Error::UnsupportedSchedule(format!(
                "closed form needs s_t = 1, found {} at t = {t}",
                st.s
            )));
        }
        let v = st.sigma * st.sigma;
        let lambda = schedule.weight_at(&st);
        let mut per_t = 0.0;
        for i in 0..dataset.len() {
            let xx = dataset.samples.column(i).norm_squared();
            let px = proj.column(i).norm_squared();
            per_t += xx - (1.0 + 2.0 * v) / (1.0 + v).powi(2) * px + v * d / (1.0 + v).powi(2);
        }
        total += lambda * per_t / dataset.len() as f64;
    }
    Ok(total / time_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;
    use crate::schedule::Weighting;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e1() -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0])
    }

    fn point_dataset() -> Dataset {
        Dataset::from_samples(DMatrix::from_column_slice(2, 1, &[2.0, 0.0]))
    }

    #[test]
    fn closed_form_hand_value() {
        let v = loss_closed_single(&e1(), &point_dataset(), &Schedule::default(), 1).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn closed_form_orthogonal_basis() {
        let u = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let sch = Schedule::ve_linear(0.0, 2.0).unwrap();
        let v = loss_closed_single(&u, &point_dataset(), &sch, 4).unwrap();
        let want: f64 = time_grid(4)
            .unwrap()
            .iter()
            .map(|t| {
                let s2 = (2.0 * t).powi(2);
                4.0 + s2 / (1.0 + s2).powi(2)
            })
            .sum::<f64>()
            / 4.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn closed_form_rejects_scaled_schedules() {
        let r = loss_closed_single(&e1(), &point_dataset(), &Schedule::vp(0.1, 20.0).unwrap(), 4);
        assert!(matches!(r, Err(Error::UnsupportedSchedule(_))));
    }

    #[test]
    fn mc_converges_to_hand_value() {
        let p = DaeParams::new(vec![e1()]).unwrap();
        let den = Trained { params: &p, kind: Parameterization::Single };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = loss_mc(&den, &point_dataset(), &Schedule::default(), 1, 100_000, &mut rng).unwrap();
        assert!((est.value - 1.25).abs() <= 3.0 * est.std_error, "{est:?}");
        assert!(est.std_error < 0.01);
    }

    #[test]
    fn zero_dataset_keeps_only_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d, steps) = (6, 2, 4);
        let u = random_orthonormal(&mut rng, n, d);
        let p = DaeParams::new(vec![u]).unwrap();
        let den = Trained { params: &p, kind: Parameterization::Single };
        let ds = Dataset::from_samples(DMatrix::zeros(n, 3));
        let sch = Schedule::vp(0.1, 20.0).unwrap();
        let est = loss_mc(&den, &ds, &sch, steps, 20_000, &mut rng).unwrap();
        let want: f64 = time_grid(steps)
            .unwrap()
            .iter()
            .map(|&t| {
                let st = sch.eval(t).unwrap();
                let (s2, g2) = (st.s * st.s, st.gamma * st.gamma);
                g2 * s2 * d as f64 / (s2 + g2).powi(2)
            })
            .sum::<f64>()
            / steps as f64;
        assert!((est.value - want).abs() <= 4.0 * est.std_error);
    }

    #[test]
    fn score_matching_agrees_draw_for_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MoLRGModel::random(&mut rng, 5, &[2, 2], false).unwrap();
        let ds = model.sample_dataset(&mut rng, 4, 0.1).unwrap();
        let p = DaeParams::from_model(&model);
        for kind in [Parameterization::Softmax, Parameterization::Hardmax] {
            for sch in [
                Schedule::default().with_weighting(Weighting::Snr),
                Schedule::vp(0.1, 20.0).unwrap(),
            ] {
                let den = Trained { params: &p, kind };
                let a = loss_mc(&den, &ds, &sch, 8, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
                let b = score_matching_loss(&den, &ds, &sch, 8, 5, &mut ChaCha8Rng::seed_from_u64(9))
                    .unwrap();
                assert!((a.value - b.value).abs() <= 1e-10 * a.value.max(1.0));
            }
        }
    }

    #[test]
    fn zero_denoiser_score_matching_expansion() {
        // x0 = 0 and x_θ ≡ 0: the residual is (0 − x_t)/γ² − (0 − x_t)/γ² = 0 per draw,
        // so the objective vanishes identically.
        let zero = |xt: &DVector<f64>, _: &DVector<f64>, _: &ScheduleState| Ok(DVector::zeros(xt.len()));
        let ds = Dataset::from_samples(DMatrix::zeros(3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sm = score_matching_loss(&zero, &ds, &Schedule::default(), 1, 10, &mut rng).unwrap();
        assert_eq!(sm.value, 0.0);
        // with a clean point x0 ≠ 0 the residual is −s x0/γ², weight s²σ⁴: value = s⁴σ⁴‖x0‖²/γ⁴ = ‖x0‖²
        let ds = Dataset::from_samples(DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]));
        let sch = Schedule::vp(0.1, 20.0).unwrap();
        let sm = score_matching_loss(&zero, &ds, &sch, 1, 3, &mut rng).unwrap();
        assert!((sm.value - 5.25).abs() < 1e-12);
    }

    #[test]
    fn score_matching_orders_model_quality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MoLRGModel::random(&mut rng, 8, &[2, 2], true).unwrap();
        let ds = model.sample_dataset(&mut rng, 20, 0.0).unwrap();
        let truth = DaeParams::from_model(&model);
        let perturbed = DaeParams::new(
            model
                .bases()
                .iter()
                .map(|u| crate::linalg::orthonormalize(&(u + crate::linalg::gaussian_matrix(&mut rng, 8, 2) * 0.3)))
                .collect(),
        )
        .unwrap();
        let random = DaeParams::new(vec![random_orthonormal(&mut rng, 8, 2), random_orthonormal(&mut rng, 8, 2)])
            .unwrap();
        let sch = Schedule::ve_linear(0.0, 4.0).unwrap();
        let eval = |p: &DaeParams| {
            let den = Trained { params: p, kind: Parameterization::Softmax };
            score_matching_loss(&den, &ds, &sch, 16, 200, &mut ChaCha8Rng::seed_from_u64(42))
                .unwrap()
                .value
        };
        let (r, q, t) = (eval(&random), eval(&perturbed), eval(&truth));
        assert!(r >= q && q >= t, "{r} {q} {t}");
    }
}
