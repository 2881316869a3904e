//! Log-volume models, their closed-form log-moments and path sampling.
//!
//! All three families keep `log v_t` Gaussian, so every model exposes the
//! mean and variance of `log v_t` and, through the lognormal identity
//! `E[1/v]^{-1} = exp(m - s2/2)`, the harmonic mean used by the expected
//! VWAP schedule.
//!
//! Sampling uses the exact Gaussian transitions of each model instead of an
//! Euler step, so the only time-discretisation error left in a Monte Carlo
//! run comes from the strategy and the cost quadrature.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::model::TimeGrid;
use crate::rng::{path_rng, PathRng};
use crate::timefn::TimeFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VolumeModel {
    /// `d log v = b_t dt + sigma_t dB`, `v_0 = v0`.
    TimeDepBs {
        v0: f64,
        drift: TimeFunction,
        vol: TimeFunction,
    },
    /// `v_t = u_bar_t exp(epsilon Z_t)` with `dZ = -rho Z dt + sigma dB`, `Z_0 = 0`.
    PerturbedOu {
        u_bar: TimeFunction,
        epsilon: f64,
        rho: f64,
        sigma: f64,
    },
    Constant {
        v_bar: f64,
    },
}

impl VolumeModel {
    pub fn constant(v_bar: f64) -> Result<Self> {
        let m = VolumeModel::Constant { v_bar };
        m.validate()?;
        Ok(m)
    }

    /// Constant-coefficient log-normal volume.
    pub fn gbm(v0: f64, drift: f64, vol: f64) -> Result<Self> {
        Self::time_dep_bs(v0, TimeFunction::constant(drift), TimeFunction::constant(vol))
    }

    pub fn time_dep_bs(v0: f64, drift: TimeFunction, vol: TimeFunction) -> Result<Self> {
        let m = VolumeModel::TimeDepBs { v0, drift, vol };
        m.validate()?;
        Ok(m)
    }

    pub fn perturbed_ou(u_bar: TimeFunction, epsilon: f64, rho: f64, sigma: f64) -> Result<Self> {
        let m = VolumeModel::PerturbedOu {
            u_bar,
            epsilon,
            rho,
            sigma,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VolexError::InvalidParameter(msg));
        match self {
            VolumeModel::Constant { v_bar } => {
                if !(v_bar.is_finite() && *v_bar > 0.0) {
                    return bad(format!("v_bar must be > 0, got {v_bar}"));
                }
            }
            VolumeModel::TimeDepBs { v0, vol, .. } => {
                if !(v0.is_finite() && *v0 > 0.0) {
                    return bad(format!("v0 must be > 0, got {v0}"));
                }
                if vol.min_value() < 0.0 {
                    return bad("volatility table must be non-negative".into());
                }
            }
            VolumeModel::PerturbedOu {
                u_bar,
                epsilon,
                rho,
                sigma,
            } => {
                if !(u_bar.min_value() > 0.0) {
                    return bad("u_bar must be positive".into());
                }
                if !(epsilon.is_finite() && *epsilon >= 0.0) {
                    return bad(format!("epsilon must be >= 0, got {epsilon}"));
                }
                if !(rho.is_finite() && *rho > 0.0) {
                    return bad(format!("rho must be > 0, got {rho}"));
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return bad(format!("sigma must be > 0, got {sigma}"));
                }
            }
        }
        Ok(())
    }

    /// Initial volume `v_0`.
    pub fn initial_volume(&self) -> f64 {
        match self {
            VolumeModel::TimeDepBs { v0, .. } => *v0,
            VolumeModel::PerturbedOu { u_bar, .. } => u_bar.value(0.0),
            VolumeModel::Constant { v_bar } => *v_bar,
        }
    }

    /// Mean and variance of `log v_t`.
    pub fn log_moments(&self, t: f64, horizon: f64) -> Result<(f64, f64)> {
        if !(t >= 0.0 && t <= horizon * (1.0 + 1e-12)) {
            return Err(VolexError::Domain(format!("t = {t} outside [0, {horizon}]")));
        }
        Ok(self.log_moments_unchecked(t))
    }

    pub(crate) fn log_moments_unchecked(&self, t: f64) -> (f64, f64) {
        match self {
            VolumeModel::Constant { v_bar } => (v_bar.ln(), 0.0),
            VolumeModel::TimeDepBs { v0, drift, vol } => (v0.ln() + drift.integral(0.0, t), vol.integral_sq(0.0, t)),
            VolumeModel::PerturbedOu {
                u_bar,
                epsilon,
                rho,
                sigma,
            } => (u_bar.value(t).ln(), epsilon * epsilon * ou_variance(*rho, *sigma, t)),
        }
    }

    /// Harmonic mean `u_t = E[1/v_t]^{-1} = exp(m_t - s2_t / 2)`.
    pub fn harmonic_mean_u(&self, t: f64, horizon: f64) -> Result<f64> {
        let (m, s2) = self.log_moments(t, horizon)?;
        Ok((m - 0.5 * s2).exp())
    }

    pub fn sample_path(&self, grid: &TimeGrid, seed: u64) -> VolumePath {
        self.sample_path_stream(grid, seed, 0)
    }

    /// Path number `path_index` of the family seeded by `seed`.
    pub fn sample_path_stream(&self, grid: &TimeGrid, seed: u64, path_index: u64) -> VolumePath {
        let mut rng = path_rng(seed, path_index);
        self.sample_with(grid, &mut rng)
    }

    pub fn sample_with(&self, grid: &TimeGrid, rng: &mut PathRng) -> VolumePath {
        let n = grid.n_steps();
        let dt = grid.dt();
        let mut v = Vec::with_capacity(n + 1);
        let mut z = Vec::with_capacity(n + 1);
        match self {
            VolumeModel::Constant { v_bar } => {
                v.resize(n + 1, *v_bar);
                z.resize(n + 1, 0.0);
            }
            VolumeModel::TimeDepBs { v0, drift, vol } => {
                let mut log_v = v0.ln();
                let mut noise = 0.0;
                v.push(*v0);
                z.push(0.0);
                for k in 0..n {
                    let (a, b) = (grid.node(k), grid.node(k + 1));
                    let sd = vol.integral_sq(a, b).sqrt();
                    let shock = if sd > 0.0 {
                        {
                            let eta: f64 = StandardNormal.sample(rng);
                            sd * eta
                        }
                    } else {
                        0.0
                    };
                    noise += shock;
                    log_v += drift.integral(a, b) + shock;
                    v.push(log_v.exp());
                    z.push(noise);
                }
            }
            VolumeModel::PerturbedOu {
                u_bar,
                epsilon,
                rho,
                sigma,
            } => {
                let decay = (-rho * dt).exp();
                let sd = sigma * (-(-2.0 * rho * dt).exp_m1() / (2.0 * rho)).sqrt();
                let mut state = 0.0;
                v.push(u_bar.value(0.0));
                z.push(0.0);
                for k in 1..=n {
                    let eta: f64 = StandardNormal.sample(rng);
                    state = state * decay + sd * eta;
                    v.push(u_bar.value(grid.node(k)) * (epsilon * state).exp());
                    z.push(state);
                }
            }
        }
        VolumePath::new(*grid, v, z)
    }
}

/// `Var(Z_t)` for the OU noise started at zero.
pub fn ou_variance(rho: f64, sigma: f64, t: f64) -> f64 {
    sigma * sigma * (-(-2.0 * rho * t).exp_m1()) / (2.0 * rho)
}

/// One sampled volume trajectory on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePath {
    grid: TimeGrid,
    v: Vec<f64>,
    z: Vec<f64>,
    v_cum: Vec<f64>,
}

impl VolumePath {
    /// Builds a path from node values; `v_cum` is the left-endpoint running sum.
    pub fn new(grid: TimeGrid, v: Vec<f64>, z: Vec<f64>) -> Self {
        assert_eq!(v.len(), grid.len(), "volume length must match grid");
        assert_eq!(z.len(), grid.len(), "noise length must match grid");
        let dt = grid.dt();
        let mut v_cum = Vec::with_capacity(v.len());
        let mut acc = 0.0;
        v_cum.push(0.0);
        for vk in &v[..grid.n_steps()] {
            acc += vk * dt;
            v_cum.push(acc);
        }
        Self { grid, v, z, v_cum }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn volume(&self) -> &[f64] {
        &self.v
    }

    /// Noise state: `Z_t` for the OU family, the drift-free part of
    /// `log v_t - log v_0` for the Black-Scholes family.
    pub fn noise(&self) -> &[f64] {
        &self.z
    }

    pub fn cumulative_volume(&self) -> &[f64] {
        &self.v_cum
    }

    /// `V_T`.
    pub fn total_volume(&self) -> f64 {
        *self.v_cum.last().expect("non-empty path")
    }
}
