//! Market parameters, time grids, execution schedules and the cost
//! functional shared by every other module.
//!
//! Costs follow the linear permanent / volume-scaled temporary impact
//! model: for a schedule `x` sold against volume `v` the expected
//! implementation shortfall is `kappa * X0^2 / 2 + kappa_tilde * E[int x^2 / v dt]`.
//! Only the dimensionless part `int x^2 / v dt` is ever simulated.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::quad::mean_and_stderr;
use crate::volume::VolumePath;

/// Impact coefficients, horizon and initial inventory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Permanent impact per unit rate.
    pub kappa: f64,
    /// Temporary impact, divided by instantaneous volume.
    pub kappa_tilde: f64,
    pub horizon: f64,
    /// Shares to liquidate.
    pub x0: f64,
}

impl MarketParams {
    pub fn new(kappa: f64, kappa_tilde: f64, horizon: f64, x0: f64) -> Result<Self> {
        let p = Self {
            kappa,
            kappa_tilde,
            horizon,
            x0,
        };
        p.validate()?;
        Ok(p)
    }

    /// The parameter block used for the volume-noise experiments:
    /// `kappa = 1e-4`, `kappa_tilde = 0.01`, `T = 1`, `X0 = 10`.
    pub fn reference() -> Self {
        Self {
            kappa: 1e-4,
            kappa_tilde: 0.01,
            horizon: 1.0,
            x0: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(VolexError::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )))
            }
        };
        positive("kappa", self.kappa)?;
        positive("kappa_tilde", self.kappa_tilde)?;
        positive("horizon", self.horizon)?;
        // Zero inventory is allowed: every strategy degenerates to x = 0.
        if !(self.x0.is_finite() && self.x0 >= 0.0) {
            return Err(VolexError::InvalidParameter(format!(
                "x0 must be finite and >= 0, got {}",
                self.x0
            )));
        }
        Ok(())
    }

    /// Expected IS cost from the dimensionless cost `j`.
    pub fn is_cost(&self, j: f64) -> f64 {
        self.permanent_cost() + self.kappa_tilde * j
    }

    /// The strategy-independent permanent-impact part `kappa X0^2 / 2`.
    pub fn permanent_cost(&self) -> f64 {
        0.5 * self.kappa * self.x0 * self.x0
    }
}

/// Uniform grid `t_k = k * dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(VolexError::InvalidParameter(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(VolexError::InvalidParameter("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_k`; the last node is exactly the horizon.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n_steps + 1).map(move |k| self.node(k))
    }

    /// Index of the last node at or before `t` (clamped to the grid).
    pub fn index_at_or_before(&self, t: f64) -> usize {
        let raw = t / self.dt();
        let k = (raw + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }
}

/// Execution rates at every grid node together with the holdings path.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionSchedule {
    grid: TimeGrid,
    rates: Vec<f64>,
    holdings: Vec<f64>,
}

impl ExecutionSchedule {
    /// Builds a schedule from rates, integrating holdings with the
    /// left-endpoint rule.
    pub fn from_rates(rates: Vec<f64>, x0: f64, grid: TimeGrid) -> Result<Self> {
        let holdings = integrate_holdings(&rates, x0, &grid)?;
        Ok(Self { grid, rates, holdings })
    }

    /// Rates rescaled so that the discrete sell-off `sum_k x_k dt = X0`
    /// holds exactly. `shape` only needs to be proportional to the rates.
    pub fn normalized(shape: Vec<f64>, x0: f64, grid: TimeGrid) -> Result<Self> {
        if shape.len() != grid.len() {
            return Err(VolexError::Structural(format!(
                "rate path has {} entries, grid has {} nodes",
                shape.len(),
                grid.len()
            )));
        }
        let dt = grid.dt();
        let mass: f64 = shape[..grid.n_steps()].iter().sum::<f64>() * dt;
        if !(mass.is_finite() && mass != 0.0) {
            return Err(VolexError::Domain(format!(
                "cannot normalize a schedule with total mass {mass}"
            )));
        }
        let scale = x0 / mass;
        let rates = shape.into_iter().map(|s| s * scale).collect();
        Self::from_rates(rates, x0, grid)
    }

    /// Assembles a schedule whose holdings were produced by a feedback rule.
    pub(crate) fn from_parts(grid: TimeGrid, rates: Vec<f64>, holdings: Vec<f64>) -> Self {
        debug_assert_eq!(rates.len(), grid.len());
        debug_assert_eq!(holdings.len(), grid.len());
        Self { grid, rates, holdings }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn holdings(&self) -> &[f64] {
        &self.holdings
    }

    pub fn terminal_holdings(&self) -> f64 {
        *self.holdings.last().expect("grid has at least two nodes")
    }

    /// `sum_k x_k dt` over the left-endpoint nodes.
    pub fn executed(&self) -> f64 {
        self.rates[..self.grid.n_steps()].iter().sum::<f64>() * self.grid.dt()
    }

    /// Whether the sell-off condition holds to `tol * X0`.
    pub fn sells_off(&self, tol: f64) -> bool {
        let x0 = self.holdings[0];
        self.terminal_holdings().abs() <= tol * x0.abs().max(f64::MIN_POSITIVE)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "X"])?;
        for (k, t) in self.grid.nodes().enumerate() {
            w.serialize((t, self.rates[k], self.holdings[k]))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Holdings `X_k = X0 - sum_{j<k} x_j dt`.
pub fn holdings_from_rates(rates: &[f64], params: &MarketParams, grid: &TimeGrid) -> Result<Vec<f64>> {
    integrate_holdings(rates, params.x0, grid)
}

fn integrate_holdings(rates: &[f64], x0: f64, grid: &TimeGrid) -> Result<Vec<f64>> {
    if rates.len() != grid.len() {
        return Err(VolexError::Structural(format!(
            "rate path has {} entries, grid has {} nodes",
            rates.len(),
            grid.len()
        )));
    }
    let dt = grid.dt();
    let mut holdings = Vec::with_capacity(rates.len());
    let mut x = x0;
    holdings.push(x);
    for r in &rates[..grid.n_steps()] {
        x -= r * dt;
        holdings.push(x);
    }
    Ok(holdings)
}

/// Left-endpoint quadrature of `int_0^T x_t^2 / v_t dt` along one path.
pub fn pathwise_cost(schedule: &ExecutionSchedule, path: &VolumePath) -> Result<f64> {
    if schedule.grid() != path.grid() {
        return Err(VolexError::Structural(
            "schedule and volume path live on different grids".into(),
        ));
    }
    rate_cost(schedule.rates(), path.volume(), schedule.grid())
}

/// Same quadrature on raw slices.
pub fn rate_cost(rates: &[f64], volume: &[f64], grid: &TimeGrid) -> Result<f64> {
    let n = grid.n_steps();
    if rates.len() != grid.len() || volume.len() != grid.len() {
        return Err(VolexError::Structural(format!(
            "expected {} nodes, got rates {} / volume {}",
            grid.len(),
            rates.len(),
            volume.len()
        )));
    }
    let mut acc = 0.0;
    for k in 0..n {
        let v = volume[k];
        if !(v > 0.0) {
            return Err(VolexError::Domain(format!("volume must be positive, v[{k}] = {v}")));
        }
        acc += rates[k] * rates[k] / v;
    }
    Ok(acc * grid.dt())
}

/// Monte Carlo summary of the dimensionless cost and the implied IS cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Sample mean of `int x^2 / v dt`.
    pub j_estimate: f64,
    /// `kappa X0^2 / 2 + kappa_tilde * j_estimate`.
    pub is_cost: f64,
    /// Standard error of `j_estimate`.
    pub stderr: f64,
    pub n_paths: usize,
}

impl CostReport {
    pub fn from_samples(params: &MarketParams, samples: &[f64]) -> Self {
        let (mean, se) = mean_and_stderr(samples);
        Self {
            j_estimate: mean,
            is_cost: params.is_cost(mean),
            stderr: se,
            n_paths: samples.len(),
        }
    }

    /// Standard error of `is_cost`.
    pub fn is_stderr(&self, params: &MarketParams) -> f64 {
        params.kappa_tilde * self.stderr
    }
}
