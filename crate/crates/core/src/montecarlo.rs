//! Monte Carlo evaluation of execution strategies.
//!
//! Path `i` of a run seeded with `s` always draws from stream `i` of the
//! generator seeded with `s`, and per-path results are collected in path order
//! before a pairwise reduction. Results therefore do not depend on the number
//! of worker threads. All strategies of one evaluation share the same paths.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::expansion::{ExpansionCoeffs, ExpansionTable, OuNoise};
use crate::hjb::{penalized_cost, penalized_rate_path, ValueSurface};
use crate::model::{rate_cost, CostReport, ExecutionSchedule, MarketParams, TimeGrid};
use crate::strategies::{analytic_adaptive_bs, exact_vwap, expected_vwap, twap};
use crate::timefn::TimeFunction;
use crate::volume::{VolumeModel, VolumePath};

/// Default forced-liquidation window as a fraction of the horizon.
pub const DEFAULT_DELTA_LIQ: f64 = 0.02;
pub const DEFAULT_N_PATHS: usize = 50_000;
pub const DEFAULT_N_STEPS: usize = 500;

/// Strategy names used in configs and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Expected VWAP.
    Static,
    /// Second-order small-noise feedback rule.
    Adaptive,
    /// Exact VWAP (knows the whole path).
    Anticipating,
    Twap,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Static => "static",
            StrategyKind::Adaptive => "adaptive",
            StrategyKind::Anticipating => "anticipating",
            StrategyKind::Twap => "twap",
        }
    }
}

/// A strategy ready to be evaluated on volume paths.
#[derive(Debug, Clone, Copy)]
pub enum StrategySpec<'a> {
    Twap,
    ExpectedVwap,
    ExactVwap,
    /// Log-normal adaptive optimum; requires `TimeDepBs` volume.
    AnalyticBs,
    Adaptive {
        table: &'a ExpansionTable,
        delta_liq: f64,
    },
    /// Penalised feedback rule; its cost includes the terminal penalty.
    Penalized {
        surface: &'a ValueSurface,
    },
    Fixed(&'a ExecutionSchedule),
}

/// Result of the adaptive feedback rule on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRun {
    pub schedule: ExecutionSchedule,
    /// Nodes where the bracket went negative and the rate was floored at zero.
    pub floored: usize,
}

/// First node of the forced-liquidation window `[T(1 - delta_liq), T]`.
pub fn liquidation_start(grid: &TimeGrid, delta_liq: f64) -> usize {
    let n = grid.n_steps();
    let k = ((1.0 - delta_liq) * n as f64 - 1e-9).ceil() as usize;
    k.min(n - 1)
}

fn check_delta_liq(delta_liq: f64) -> Result<()> {
    if !(delta_liq > 0.0 && delta_liq <= 0.2) {
        return Err(VolexError::InvalidParameter(format!(
            "delta_liq must lie in (0, 0.2], got {delta_liq}"
        )));
    }
    Ok(())
}

/// Adaptive rule `x_k = X_k v_k (W0_k + eps I1(t_k, Z_k) + eps^2 I2(t_k, Z_k))`
/// with explicit Euler holdings, floored at zero and capped at `X_k / dt`.
/// The holdings left at the start of the liquidation window are sold at a
/// constant rate, so `X_T = 0` holds exactly. Rates at node `k` read path
/// values at node `k` only.
pub fn simulate_adaptive(
    params: &MarketParams,
    table: &ExpansionTable,
    path: &VolumePath,
    delta_liq: f64,
) -> Result<AdaptiveRun> {
    check_delta_liq(delta_liq)?;
    let grid = *path.grid();
    if *table.grid() != grid {
        return Err(VolexError::Structural(
            "expansion table and volume path live on different grids".into(),
        ));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let k_liq = liquidation_start(&grid, delta_liq);
    let (v, z) = (path.volume(), path.noise());
    let mut rates = Vec::with_capacity(n + 1);
    let mut holdings = Vec::with_capacity(n + 1);
    let mut floored = 0;
    let mut x = params.x0;
    for k in 0..k_liq {
        holdings.push(x);
        let mut rate = x * v[k] * table.w(k, z[k]);
        if rate < 0.0 {
            rate = 0.0;
            floored += 1;
        }
        rate = rate.min(x / dt);
        rates.push(rate);
        x -= rate * dt;
    }
    let liq_rate = x / ((n - k_liq) as f64 * dt);
    for _ in k_liq..n {
        holdings.push(x);
        rates.push(liq_rate);
        x -= liq_rate * dt;
    }
    // Sold out exactly; rounding residue is not carried.
    holdings.push(0.0);
    rates.push(liq_rate);
    Ok(AdaptiveRun {
        schedule: ExecutionSchedule::from_parts(grid, rates, holdings),
        floored,
    })
}

/// Prepared per-run form of a strategy.
enum Prepared<'a> {
    Static(ExecutionSchedule),
    ExactVwap,
    Adaptive { table: &'a ExpansionTable, delta_liq: f64 },
    Penalized { surface: &'a ValueSurface },
}

fn prepare<'a>(
    params: &MarketParams,
    spec: &StrategySpec<'a>,
    model: &VolumeModel,
    grid: &TimeGrid,
) -> Result<Prepared<'a>> {
    Ok(match *spec {
        StrategySpec::Twap => Prepared::Static(twap(params, grid)),
        StrategySpec::ExpectedVwap => Prepared::Static(expected_vwap(params, model, grid)?),
        StrategySpec::ExactVwap => Prepared::ExactVwap,
        StrategySpec::AnalyticBs => match model {
            VolumeModel::TimeDepBs { drift, vol, .. } => {
                Prepared::Static(analytic_adaptive_bs(params, drift, vol, grid)?)
            }
            _ => {
                return Err(VolexError::InvalidParameter(
                    "analytic adaptive strategy needs log-normal volume".into(),
                ))
            }
        },
        StrategySpec::Adaptive { table, delta_liq } => {
            check_delta_liq(delta_liq)?;
            if table.grid() != grid {
                return Err(VolexError::Structural(
                    "expansion table grid differs from the simulation grid".into(),
                ));
            }
            Prepared::Adaptive { table, delta_liq }
        }
        StrategySpec::Penalized { surface } => Prepared::Penalized { surface },
        StrategySpec::Fixed(s) => {
            if s.grid() != grid {
                return Err(VolexError::Structural(
                    "fixed schedule grid differs from the simulation grid".into(),
                ));
            }
            Prepared::Static(s.clone())
        }
    })
}

/// Pathwise cost and flooring count.
fn evaluate(params: &MarketParams, p: &Prepared<'_>, path: &VolumePath) -> Result<(f64, usize)> {
    let grid = path.grid();
    match p {
        Prepared::Static(s) => Ok((rate_cost(s.rates(), path.volume(), grid)?, 0)),
        Prepared::ExactVwap => {
            let s = exact_vwap(params, path)?;
            Ok((rate_cost(s.rates(), path.volume(), grid)?, 0))
        }
        Prepared::Adaptive { table, delta_liq } => {
            let run = simulate_adaptive(params, table, path, *delta_liq)?;
            Ok((rate_cost(run.schedule.rates(), path.volume(), grid)?, run.floored))
        }
        Prepared::Penalized { surface } => {
            let s = penalized_rate_path(surface, path, params.x0)?;
            Ok((penalized_cost(surface, &s, path)?, 0))
        }
    }
}

/// Cost report of every strategy evaluated on common paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostComparison {
    pub reports: Vec<CostReport>,
    /// Total flooring events per strategy.
    pub floored: Vec<usize>,
}

fn check_run(n_paths: usize) -> Result<()> {
    if n_paths < 2 {
        return Err(VolexError::InvalidParameter(format!(
            "need at least two paths for a standard error, got {n_paths}"
        )));
    }
    Ok(())
}

/// Evaluates all `specs` on the same `n_paths` volume paths.
pub fn estimate_costs(
    params: &MarketParams,
    specs: &[StrategySpec<'_>],
    model: &VolumeModel,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<CostComparison> {
    check_run(n_paths)?;
    model.validate()?;
    let prepared = specs
        .iter()
        .map(|s| prepare(params, s, model, grid))
        .collect::<Result<Vec<_>>>()?;
    let per_path = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = model.sample_path_stream(grid, seed, i);
            prepared
                .iter()
                .map(|p| evaluate(params, p, &path))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(specs.len());
    let mut floored = Vec::with_capacity(specs.len());
    for s in 0..specs.len() {
        let samples: Vec<f64> = per_path.iter().map(|row| row[s].0).collect();
        reports.push(CostReport::from_samples(params, &samples));
        floored.push(per_path.iter().map(|row| row[s].1).sum());
    }
    Ok(CostComparison { reports, floored })
}

/// Mean and standard error of the cost of one strategy.
pub fn estimate_cost(
    params: &MarketParams,
    spec: &StrategySpec<'_>,
    model: &VolumeModel,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<CostReport> {
    Ok(
        estimate_costs(params, std::slice::from_ref(spec), model, n_paths, grid, seed)?
            .reports
            .remove(0),
    )
}

/// Standard error of a difference of two independent-looking estimates,
/// `sqrt(se_a^2 + se_b^2)`.
pub fn joint_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Pearson correlation; zero when either series is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let scale = 1e-24 * (ma * ma + mb * mb).max(f64::MIN_POSITIVE) * n;
    if saa <= scale || sbb <= scale {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Perturbed-OU experiment over grids of noise size and mean-reversion speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: MarketParams,
    /// Baseline volume `u_bar_t`.
    pub u_bar: TimeFunction,
    /// Noise volatility.
    pub sigma: f64,
    pub rhos: Vec<f64>,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta_liq")]
    pub delta_liq: f64,
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Static, StrategyKind::Adaptive, StrategyKind::Anticipating]
}

fn default_n_paths() -> usize {
    DEFAULT_N_PATHS
}

fn default_n_steps() -> usize {
    DEFAULT_N_STEPS
}

fn default_delta_liq() -> f64 {
    DEFAULT_DELTA_LIQ
}

impl ExperimentConfig {
    /// Reference market with `u_bar = 100`, `sigma = 0.3` and the given grids.
    pub fn reference(rhos: Vec<f64>, epsilons: Vec<f64>) -> Self {
        Self {
            params: MarketParams::reference(),
            u_bar: TimeFunction::constant(100.0),
            sigma: 0.3,
            rhos,
            epsilons,
            strategies: default_strategies(),
            n_paths: DEFAULT_N_PATHS,
            n_steps: DEFAULT_N_STEPS,
            seed: 0,
            delta_liq: DEFAULT_DELTA_LIQ,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        check_run(self.n_paths)?;
        check_delta_liq(self.delta_liq)?;
        if self.n_steps < 2 {
            return Err(VolexError::InvalidParameter("n_steps must be >= 2".into()));
        }
        if self.rhos.is_empty() || self.epsilons.is_empty() || self.strategies.is_empty() {
            return Err(VolexError::Config(
                "rho, epsilon and strategy lists must be non-empty".into(),
            ));
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(VolexError::InvalidParameter(
                "epsilon values must be finite and >= 0".into(),
            ));
        }
        for &rho in &self.rhos {
            OuNoise::new(rho, self.sigma)?;
        }
        VolumeModel::perturbed_ou(self.u_bar.clone(), 0.0, self.rhos[0], self.sigma)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.params.horizon, self.n_steps)
    }

    pub fn model(&self, rho: f64, epsilon: f64) -> Result<VolumeModel> {
        VolumeModel::perturbed_ou(self.u_bar.clone(), epsilon, rho, self.sigma)
    }

    fn table(&self, rho: f64, grid: &TimeGrid) -> Result<ExpansionTable> {
        let noise = OuNoise::new(rho, self.sigma)?;
        ExpansionCoeffs::new(self.u_bar.clone(), self.params.horizon, 0.0)?
            .with_quadrature(self.n_steps)
            .ou_table(&noise, grid)
    }
}

/// One `(epsilon, rho, strategy)` row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub rho: f64,
    pub strategy: StrategyKind,
    pub report: CostReport,
    pub floored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub params: MarketParams,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, rho: f64, epsilon: f64, strategy: StrategyKind) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.rho == rho && r.epsilon == epsilon && r.strategy == strategy)
    }

    /// Writes `epsilon,rho,strategy,J,IS,stderr,n_paths`; `stderr` is the
    /// standard error of `IS`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "rho", "strategy", "J", "IS", "stderr", "n_paths"])?;
        for r in &self.rows {
            w.serialize((
                r.epsilon,
                r.rho,
                r.strategy.as_str(),
                r.report.j_estimate,
                r.report.is_cost,
                r.report.is_stderr(&self.params),
                r.report.n_paths,
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Costs of the configured strategies for every `(rho, epsilon)` pair. Every
/// row reuses the same path seeds, so rows differ only through the model.
pub fn epsilon_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let grid = config.grid()?;
    let mut rows = Vec::new();
    for &rho in &config.rhos {
        let base = config.table(rho, &grid)?;
        for &eps in &config.epsilons {
            let model = config.model(rho, eps)?;
            let table = base.with_epsilon(eps);
            let specs: Vec<StrategySpec<'_>> = config
                .strategies
                .iter()
                .map(|k| match k {
                    StrategyKind::Static => StrategySpec::ExpectedVwap,
                    StrategyKind::Adaptive => StrategySpec::Adaptive {
                        table: &table,
                        delta_liq: config.delta_liq,
                    },
                    StrategyKind::Anticipating => StrategySpec::ExactVwap,
                    StrategyKind::Twap => StrategySpec::Twap,
                })
                .collect();
            let cmp = estimate_costs(&config.params, &specs, &model, config.n_paths, &grid, config.seed)?;
            for (i, k) in config.strategies.iter().enumerate() {
                rows.push(SweepRow {
                    epsilon: eps,
                    rho,
                    strategy: *k,
                    report: cmp.reports[i],
                    floored: cmp.floored[i],
                });
            }
            log::info!("sweep rho = {rho}, epsilon = {eps} done");
        }
    }
    Ok(SweepResult {
        params: config.params,
        rows,
    })
}

/// Rates of the three strategies along one volume path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: TimeGrid,
    pub volume: Vec<f64>,
    pub x_static: Vec<f64>,
    pub x_adaptive: Vec<f64>,
    pub x_anticipating: Vec<f64>,
    pub floored: usize,
}

impl PathSample {
    /// Writes `t,v,x_stat,x_adap,x_ant`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "v", "x_stat", "x_adap", "x_ant"])?;
        for (k, t) in self.grid.nodes().enumerate() {
            w.serialize((
                t,
                self.volume[k],
                self.x_static[k],
                self.x_adaptive[k],
                self.x_anticipating[k],
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Strategy rates on path `path_index` of the run seeded by `config.seed`.
pub fn sample_paths(config: &ExperimentConfig, rho: f64, epsilon: f64, path_index: u64) -> Result<PathSample> {
    config.validate()?;
    let grid = config.grid()?;
    let model = config.model(rho, epsilon)?;
    let table = config.table(rho, &grid)?.with_epsilon(epsilon);
    let path = model.sample_path_stream(&grid, config.seed, path_index);
    let stat = expected_vwap(&config.params, &model, &grid)?;
    let adap = simulate_adaptive(&config.params, &table, &path, config.delta_liq)?;
    let ant = exact_vwap(&config.params, &path)?;
    Ok(PathSample {
        grid,
        volume: path.volume().to_vec(),
        x_static: stat.rates().to_vec(),
        x_adaptive: adap.schedule.rates().to_vec(),
        x_anticipating: ant.rates().to_vec(),
        floored: adap.floored,
    })
}
