//! Forward-process schedules: the transition kernel `N(s_t x0, s_t² σ_t² I)` and loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VeLinear,
    Vp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unit,
    Snr,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve_linear" | "ve" => Ok(Self::VeLinear),
            "vp" => Ok(Self::Vp),
            _ => Err(invalid(format!("unknown schedule kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::VeLinear => "ve_linear",
            Self::Vp => "vp",
        })
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unit" => Ok(Self::Unit),
            "snr" => Ok(Self::Snr),
            _ => Err(invalid(format!("unknown weighting `{s}`"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unit => "unit",
            Self::Snr => "snr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub vp_beta_min: f64,
    pub vp_beta_max: f64,
    pub lambda: Weighting,
}

/// Scalars of the forward process at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub t: f64,
    pub s: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl ScheduleState {
    /// Build a state from `s` and `sigma` directly. `gamma = 0` is allowed; `phi` is then infinite.
    pub fn from_scale(t: f64, s: f64, sigma: f64) -> Self {
        let gamma = s * sigma;
        let phi = if gamma > 0.0 {
            s * s / (2.0 * gamma * gamma * (s * s + gamma * gamma))
        } else {
            f64::INFINITY
        };
        Self { t, s, sigma, gamma, phi }
    }

    /// `s / (s² + γ²)`, the shrinkage in front of every projection.
    pub fn shrink(&self) -> f64 {
        self.s / (self.s * self.s + self.gamma * self.gamma)
    }

    pub fn snr(&self) -> f64 {
        1.0 / self.sigma
    }

    pub fn require_noise(&self) -> Result<()> {
        if self.gamma > 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateState { t: self.t })
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VeLinear,
            sigma_min: 0.0,
            sigma_max: 1.0,
            vp_beta_min: 0.1,
            vp_beta_max: 20.0,
            lambda: Weighting::Unit,
        }
    }
}

impl Schedule {
    pub fn ve_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp(beta_min: f64, beta_max: f64) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::Vp,
            vp_beta_min: beta_min,
            vp_beta_max: beta_max,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_weighting(mut self, lambda: Weighting) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScheduleKind::VeLinear => {
                if !(self.sigma_min >= 0.0 && self.sigma_min < self.sigma_max)
                    || !self.sigma_max.is_finite()
                {
                    return Err(invalid(format!(
                        "need 0 <= sigma_min < sigma_max, got {} and {}",
                        self.sigma_min, self.sigma_max
                    )));
                }
            }
            ScheduleKind::Vp => {
                if !(self.vp_beta_min > 0.0 && self.vp_beta_max >= self.vp_beta_min)
                    || !self.vp_beta_max.is_finite()
                {
                    return Err(invalid(format!(
                        "need 0 < beta_min <= beta_max, got {} and {}",
                        self.vp_beta_min, self.vp_beta_max
                    )));
                }
            }
        }
        Ok(())
    }

    fn beta(&self, t: f64) -> f64 {
        self.vp_beta_min + t * (self.vp_beta_max - self.vp_beta_min)
    }

    /// `∫₀ᵗ β`.
    fn beta_integral(&self, t: f64) -> f64 {
        self.vp_beta_min * t + 0.5 * (self.vp_beta_max - self.vp_beta_min) * t * t
    }

    /// `s_t` and `σ_t` without the degeneracy check.
    pub fn scale_and_sigma(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::VeLinear => (1.0, self.sigma_min + t * (self.sigma_max - self.sigma_min)),
            ScheduleKind::Vp => {
                let b = self.beta_integral(t);
                ((-0.5 * b).exp(), b.exp_m1().sqrt())
            }
        }
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleState> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("time {t} outside [0, 1]")));
        }
        let (s, sigma) = self.scale_and_sigma(t);
        let state = ScheduleState::from_scale(t, s, sigma);
        state.require_noise()?;
        Ok(state)
    }

    /// Loss weight `λ_t`.
    pub fn weighting(&self, t: f64) -> Result<f64> {
        let st = self.eval(t)?;
        Ok(self.weight_at(&st))
    }

    pub fn weight_at(&self, st: &ScheduleState) -> f64 {
        match self.lambda {
            Weighting::Unit => 1.0,
            Weighting::Snr => 1.0 / (st.s * st.s * st.sigma.powi(4)),
        }
    }

    /// Drift coefficient `f(t) = d log s / dt`.
    pub fn drift(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VeLinear => 0.0,
            ScheduleKind::Vp => -0.5 * self.beta(t),
        }
    }

    /// Squared diffusion `g²(t) = s² dσ²/dt`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VeLinear => {
                let sigma = self.sigma_min + t * (self.sigma_max - self.sigma_min);
                2.0 * sigma * (self.sigma_max - self.sigma_min)
            }
            ScheduleKind::Vp => self.beta(t),
        }
    }

    /// Inverse of `t ↦ σ_t`, clamped to `[0, 1]`.
    pub fn time_for_sigma(&self, sigma: f64) -> f64 {
        let t = match self.kind {
            ScheduleKind::VeLinear => (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min),
            ScheduleKind::Vp => {
                let b = (sigma * sigma).ln_1p();
                let slope = self.vp_beta_max - self.vp_beta_min;
                if slope.abs() < 1e-300 {
                    b / self.vp_beta_min
                } else {
                    let a = self.vp_beta_min;
                    2.0 * b / (a + (a * a + 2.0 * slope * b).sqrt())
                }
            }
        };
        t.clamp(0.0, 1.0)
    }
}

/// `steps` uniformly spaced times `k / steps`, `k = 1..=steps`.
pub fn time_grid(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("time grid needs at least one step"));
    }
    Ok((1..=steps).map(|k| k as f64 / steps as f64).collect())
}

pub const DEFAULT_TIME_STEPS: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ve_endpoint() {
        let st = Schedule::default().eval(1.0).unwrap();
        assert_eq!((st.s, st.sigma, st.gamma, st.phi), (1.0, 1.0, 1.0, 0.25));
    }

    #[test]
    fn ve_midpoint_wide() {
        let st = Schedule::ve_linear(0.0, 10.0).unwrap().eval(0.5).unwrap();
        assert_eq!(st.sigma, 5.0);
        assert!((st.phi - 1.0 / 1300.0).abs() < 1e-18);
    }

    #[test]
    fn degenerate_at_zero() {
        assert!(matches!(
            Schedule::default().eval(0.0),
            Err(Error::DegenerateState { .. })
        ));
        assert!(Schedule::ve_linear(0.1, 1.0).unwrap().eval(0.0).is_ok());
        assert!(Schedule::default().eval(1.5).is_err());
    }

    #[test]
    fn invalid_construction() {
        assert!(Schedule::ve_linear(1.0, 1.0).is_err());
        assert!(Schedule::ve_linear(-0.1, 1.0).is_err());
        assert!(Schedule::vp(0.0, 20.0).is_err());
    }

    /// Composite Simpson on a fine grid.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
        let h = (b - a) / m as f64;
        let mut acc = f(a) + f(b);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn vp_matches_quadrature_of_the_kernel_integrals() {
        let sch = Schedule::vp(0.1, 20.0).unwrap();
        let beta = |t: f64| 0.1 + t * 19.9;
        let s_of = |t: f64| (-0.5 * simpson(beta, 0.0, t, 2000)).exp();
        let t = 0.5;
        let s = s_of(t);
        // σ² = ∫ g²/s² with g² = β
        let sigma2 = simpson(|u| beta(u) / s_of(u).powi(2), 0.0, t, 400);
        let st = sch.eval(t).unwrap();
        assert!((st.s - s).abs() < 1e-12);
        assert!((st.sigma - sigma2.sqrt()).abs() < 1e-8);
        assert!((st.s * st.s * (1.0 + st.sigma * st.sigma) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn drift_and_diffusion_are_consistent_with_s_and_sigma() {
        for sch in [Schedule::vp(0.1, 20.0).unwrap(), Schedule::ve_linear(0.002, 3.0).unwrap()] {
            for &t in &[0.1, 0.4, 0.9] {
                let h = 1e-6;
                let (sp, gp) = sch.scale_and_sigma(t + h);
                let (sm, gm) = sch.scale_and_sigma(t - h);
                let (s, _) = sch.scale_and_sigma(t);
                let dlog_s = (sp.ln() - sm.ln()) / (2.0 * h);
                let dsig2 = (gp * gp - gm * gm) / (2.0 * h);
                assert!((dlog_s - sch.drift(t)).abs() < 1e-6);
                assert!((s * s * dsig2 - sch.diffusion_sq(t)).abs() < 1e-5 * sch.diffusion_sq(t));
            }
        }
    }

    #[test]
    fn weights() {
        let unit = Schedule::default();
        assert_eq!(unit.weighting(0.3).unwrap(), 1.0);
        let snr = Schedule::default().with_weighting(Weighting::Snr);
        assert_eq!(snr.weighting(1.0).unwrap(), 1.0);
        let wide = Schedule::ve_linear(0.0, 10.0).unwrap().with_weighting(Weighting::Snr);
        assert!((wide.weighting(0.5).unwrap() - 0.0016).abs() < 1e-18);
    }

    #[test]
    fn grids() {
        assert_eq!(time_grid(1).unwrap(), vec![1.0]);
        assert_eq!(time_grid(4).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        let g = time_grid(64).unwrap();
        assert_eq!((g.len(), g[0], g[63]), (64, 1.0 / 64.0, 1.0));
        assert!(time_grid(0).is_err());
    }

    fn any_schedule() -> impl Strategy<Value = Schedule> {
        prop_oneof![
            (0.0..1.0f64, 0.01..5.0f64)
                .prop_map(|(lo, w)| Schedule::ve_linear(lo, lo + w).unwrap()),
            (0.01..1.0f64, 0.0..30.0f64).prop_map(|(b0, w)| Schedule::vp(b0, b0 + w).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn state_is_self_consistent(sch in any_schedule(), t in 1e-3..=1.0f64) {
            let st = sch.eval(t).unwrap();
            prop_assert_eq!(st.gamma, st.s * st.sigma);
            let phi = st.s * st.s / (2.0 * st.gamma * st.gamma * (st.s * st.s + st.gamma * st.gamma));
            prop_assert!((st.phi - phi).abs() <= 1e-14 * phi);
            prop_assert!(st.phi > 0.0 && st.s > 0.0 && st.sigma > 0.0);
        }

        #[test]
        fn sigma_increases(sch in any_schedule(), a in 1e-3..1.0f64, b in 1e-3..1.0f64) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sch.eval(lo).unwrap().sigma < sch.eval(hi).unwrap().sigma);
        }

        #[test]
        fn sigma_inverse_round_trips(sch in any_schedule(), t in 1e-3..=1.0f64) {
            let st = sch.eval(t).unwrap();
            prop_assert!((sch.time_for_sigma(st.sigma) - t).abs() < 1e-9);
        }
    }
}
