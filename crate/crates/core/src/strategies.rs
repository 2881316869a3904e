//! Closed-form execution schedules.
//!
//! Every deterministic schedule is renormalised on the grid so that
//! `sum_k x_k dt = X0` holds exactly; this keeps cost comparisons between
//! strategies free of quadrature bias in the sell-off constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::model::{ExecutionSchedule, MarketParams, TimeGrid};
use crate::timefn::TimeFunction;
use crate::volume::{VolumeModel, VolumePath};

/// Constant-rate liquidation `x = X0 / T`.
pub fn twap(params: &MarketParams, grid: &TimeGrid) -> ExecutionSchedule {
    let rate = params.x0 / grid.horizon();
    ExecutionSchedule::from_rates(vec![rate; grid.len()], params.x0, *grid).expect("rate vector built from the grid")
}

/// Anticipating schedule `x_k = X0 v_k / V_T`, with `V_T` the discrete
/// cumulative volume of the same path.
pub fn exact_vwap(params: &MarketParams, path: &VolumePath) -> Result<ExecutionSchedule> {
    let total = path.total_volume();
    if !(total > 0.0) {
        return Err(VolexError::Domain(format!(
            "exact VWAP needs positive total volume, got {total}"
        )));
    }
    let rates = path.volume().iter().map(|v| params.x0 * v / total).collect();
    ExecutionSchedule::from_rates(rates, params.x0, *path.grid())
}

/// Static schedule proportional to the harmonic mean of volume.
pub fn expected_vwap(params: &MarketParams, model: &VolumeModel, grid: &TimeGrid) -> Result<ExecutionSchedule> {
    let shape = grid
        .nodes()
        .map(|t| model.harmonic_mean_u(t, grid.horizon()))
        .collect::<Result<Vec<f64>>>()?;
    ExecutionSchedule::normalized(shape, params.x0, *grid)
}

/// Adaptive optimum under time-dependent Black-Scholes volume:
/// `x_t ∝ exp(-int_t^T (b_s - sigma_s^2/2) ds)`.
pub fn analytic_adaptive_bs(
    params: &MarketParams,
    drift: &TimeFunction,
    vol: &TimeFunction,
    grid: &TimeGrid,
) -> Result<ExecutionSchedule> {
    let horizon = grid.horizon();
    let shape = grid
        .nodes()
        .map(|t| (-(drift.integral(t, horizon) - 0.5 * vol.integral_sq(t, horizon))).exp())
        .collect();
    ExecutionSchedule::normalized(shape, params.x0, *grid)
}

/// Twisted expected VWAP for temporary impact `gamma v^-beta x^alpha` and
/// volume `u_bar_t exp(int sigma dB)`:
/// `x_t ∝ exp(beta^2/(2 alpha) int_t^T sigma^2 ds) u_bar_t^(beta/alpha)`.
pub fn twisted_vwap(
    params: &MarketParams,
    u_bar: &TimeFunction,
    vol: &TimeFunction,
    alpha: f64,
    beta: f64,
    grid: &TimeGrid,
) -> Result<ExecutionSchedule> {
    if !(alpha > 0.0) || !(beta >= 0.0) {
        return Err(VolexError::InvalidParameter(format!(
            "twisted VWAP needs alpha > 0 and beta >= 0, got alpha = {alpha}, beta = {beta}"
        )));
    }
    if !(u_bar.min_value() > 0.0) {
        return Err(VolexError::InvalidParameter("u_bar must be positive".into()));
    }
    let horizon = grid.horizon();
    let c = beta * beta / (2.0 * alpha);
    let power = beta / alpha;
    let shape = grid
        .nodes()
        .map(|t| (c * vol.integral_sq(t, horizon)).exp() * u_bar.value(t).powf(power))
        .collect();
    ExecutionSchedule::normalized(shape, params.x0, *grid)
}

/// Parameters of the volume-scaled permanent impact problem, where volume
/// follows `d log v = mu dt + sigma dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermanentImpactParams {
    pub mu: f64,
    pub sigma: f64,
    /// `mu - sigma^2 / 2`.
    pub mu_tilde: f64,
    /// Discriminant `mu_tilde^2 - 2 mu_tilde kappa / kappa_tilde`.
    pub d_disc: f64,
    /// `sqrt(|d_disc|)`.
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermanentRegime {
    /// `D < 0`: trigonometric solution, needs `gamma T < 2 pi`.
    Oscillatory,
    /// `D = 0`.
    Critical,
    /// `D > 0`: exponential solution.
    Exponential,
}

impl PermanentImpactParams {
    pub fn new(mu: f64, sigma: f64, params: &MarketParams) -> Self {
        let mu_tilde = mu - 0.5 * sigma * sigma;
        Self::from_mu_tilde(mu_tilde, sigma, params)
    }

    pub fn from_mu_tilde(mu_tilde: f64, sigma: f64, params: &MarketParams) -> Self {
        let d_disc = mu_tilde * mu_tilde - 2.0 * mu_tilde * params.kappa / params.kappa_tilde;
        Self {
            mu: mu_tilde + 0.5 * sigma * sigma,
            sigma,
            mu_tilde,
            d_disc,
            gamma: d_disc.abs().sqrt(),
        }
    }

    /// Sign of `D`; values within rounding of zero count as critical.
    pub fn regime(&self) -> PermanentRegime {
        let scale = self.mu_tilde * self.mu_tilde + (self.mu_tilde * self.mu_tilde - self.d_disc).abs();
        if self.d_disc.abs() <= 1e-14 * scale {
            PermanentRegime::Critical
        } else if self.d_disc < 0.0 {
            PermanentRegime::Oscillatory
        } else {
            PermanentRegime::Exponential
        }
    }

    /// `E[1 / v_t]` for `v_0 = v0`.
    pub fn expected_inverse_volume(&self, v0: f64, t: f64) -> f64 {
        (-self.mu_tilde * t).exp() / v0
    }

    /// Continuous-time optimal rate at `t` (not renormalised).
    pub fn rate(&self, params: &MarketParams, t: f64) -> Result<f64> {
        self.rate_in_regime(params, t, self.regime())
    }

    /// Rate from the formula of `regime`, whatever the sign of `D`; `gamma`
    /// is taken as `sqrt(|D|)` and ignored by the critical formula.
    pub fn rate_in_regime(&self, params: &MarketParams, t: f64, regime: PermanentRegime) -> Result<f64> {
        let (x0, horizon, m, g) = (params.x0, params.horizon, self.mu_tilde, self.gamma);
        match regime {
            PermanentRegime::Oscillatory => {
                if g * horizon >= 2.0 * std::f64::consts::PI {
                    return Err(VolexError::UnsupportedRegime(format!(
                        "D < 0 requires gamma T < 2 pi, got gamma T = {}",
                        g * horizon
                    )));
                }
                let half = 0.5 * g * (horizon - t);
                Ok(x0 * (0.5 * m * t).exp() / (2.0 * (0.5 * g * horizon).sin()) * (g * half.cos() - m * half.sin()))
            }
            PermanentRegime::Critical => Ok(x0 * (0.5 * m * t).exp() * (1.0 / horizon - 0.5 * m * (1.0 - t / horizon))),
            PermanentRegime::Exponential => {
                let denom = 2.0 * (g * horizon).exp_m1();
                let up = (m + g) * (0.5 * (m + g) * t).exp();
                let down = (m - g) * (0.5 * (m - g) * t + g * horizon).exp();
                Ok(x0 * (up - down) / denom)
            }
        }
    }
}

/// Optimal static schedule under volume-scaled permanent and temporary impact.
/// Rates may be negative (buying) in some regimes.
pub fn permanent_impact_strategy(
    params: &MarketParams,
    ab: &PermanentImpactParams,
    grid: &TimeGrid,
) -> Result<ExecutionSchedule> {
    let shape = grid.nodes().map(|t| ab.rate(params, t)).collect::<Result<Vec<f64>>>()?;
    if params.x0 == 0.0 {
        return ExecutionSchedule::from_rates(shape, 0.0, *grid);
    }
    ExecutionSchedule::normalized(shape, params.x0, *grid)
}

/// Deterministic cost `sum_k (kappa X_k x_k + kappa_tilde x_k^2) w_k dt`
/// with `w_k = E[1 / v_{t_k}]`.
pub fn permanent_impact_cost(
    schedule: &ExecutionSchedule,
    params: &MarketParams,
    inverse_volume: impl Fn(f64) -> f64,
) -> f64 {
    let grid = schedule.grid();
    let (x, hold) = (schedule.rates(), schedule.holdings());
    let mut acc = 0.0;
    for k in 0..grid.n_steps() {
        let w = inverse_volume(grid.node(k));
        acc += (params.kappa * hold[k] * x[k] + params.kappa_tilde * x[k] * x[k]) * w;
    }
    acc * grid.dt()
}
