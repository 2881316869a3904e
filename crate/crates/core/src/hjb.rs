//! Penalised value function by finite differences.
//!
//! `W^lambda` solves `W_t + A W = v W^2` backward in time from a terminal
//! penalty, where `A` is the generator of the state. For log-normal volume the
//! state is `y = log v` and `A = b_t d/dy + sigma_t^2/2 d^2/dy^2`. For perturbed
//! OU volume the state is the noise `z`, `A = -rho z d/dz + sigma^2/2 d^2/dz^2`
//! and `v = u_bar_t exp(epsilon z)`. Constant volume is the log-normal case with
//! zero coefficients.
//!
//! Time stepping is Crank-Nicolson in the generator with the reaction written
//! as `dt v W^{i+1} W^i`. That product form is linear in the unknown slice and
//! integrates the pure Riccati part `W' = v W^2` exactly.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::model::{rate_cost, ExecutionSchedule};
use crate::timefn::TimeFunction;
use crate::volume::{ou_variance, VolumeModel, VolumePath};

/// Default penalty schedule for [`lambda_sweep`].
pub const DEFAULT_LAMBDAS: [f64; 6] = [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0];

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// Space-time grid. The initial state is always a node; the state range
/// covers `width_sd` standard deviations of the state over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub horizon: f64,
    pub n_t: usize,
    pub n_y: usize,
    #[serde(default = "default_width_sd")]
    pub width_sd: f64,
    /// Lower bound on the half width of the state range.
    #[serde(default = "default_min_half_width")]
    pub min_half_width: f64,
    /// Keep every `save_every`-th time slice (the terminal slice is always kept).
    #[serde(default = "default_save_every")]
    pub save_every: usize,
}

fn default_width_sd() -> f64 {
    5.0
}

fn default_min_half_width() -> f64 {
    0.5
}

fn default_save_every() -> usize {
    1
}

impl PdeGrid {
    pub fn new(horizon: f64, n_t: usize, n_y: usize) -> Result<Self> {
        let g = Self {
            horizon,
            n_t,
            n_y,
            width_sd: default_width_sd(),
            min_half_width: default_min_half_width(),
            save_every: 1,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n_t = 2000`, `n_y = 400`.
    pub fn standard(horizon: f64) -> Self {
        Self::new(horizon, 2000, 400).expect("standard grid is valid")
    }

    /// Halves both the time step and the state spacing.
    pub fn refined(&self) -> Self {
        Self {
            n_t: 2 * self.n_t,
            n_y: 2 * ((self.n_y - 1) / 2) * 2 + 1,
            save_every: self.save_every * 2,
            ..*self
        }
    }

    pub fn with_save_every(mut self, every: usize) -> Self {
        self.save_every = every.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(VolexError::InvalidParameter(format!(
                "PDE horizon must be > 0, got {}",
                self.horizon
            )));
        }
        if self.n_t < 1 {
            return Err(VolexError::InvalidParameter("PDE grid needs n_t >= 1".into()));
        }
        if self.n_y < 5 {
            return Err(VolexError::InvalidParameter(format!(
                "PDE grid needs n_y >= 5, got {}",
                self.n_y
            )));
        }
        if !(self.width_sd > 0.0 && self.min_half_width >= 0.0) {
            return Err(VolexError::InvalidParameter("PDE grid width must be positive".into()));
        }
        if self.save_every == 0 {
            return Err(VolexError::InvalidParameter("save_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }
}

/// Terminal condition of the penalised problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    /// `W(T) = lambda / v_T`, penalty `lambda X_T^2 / v_T`.
    PerVolume,
    /// `W(T) = lambda`, penalty `lambda X_T^2`.
    Flat,
}

/// Conditions at the ends of the state range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Dirichlet values from the log-normal closed form.
    ClosedForm,
    /// Diffusion dropped, advection one-sided into the domain.
    ZeroCurvature,
    /// `d(v W)/dx = 0`; exact for solutions of the form `f(t) / v`.
    ScaledNeumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    /// Implicitness of the generator; 0.5 is Crank-Nicolson.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Solve the trapezoidal reaction to tolerance with Newton instead of the
    /// single linearised step.
    #[serde(default)]
    pub newton: bool,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
    #[serde(default = "default_terminal")]
    pub terminal: Terminal,
}

fn default_theta() -> f64 {
    0.5
}

fn default_boundary() -> Boundary {
    Boundary::ScaledNeumann
}

fn default_terminal() -> Terminal {
    Terminal::PerVolume
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            newton: false,
            boundary: default_boundary(),
            terminal: default_terminal(),
        }
    }
}

impl SolverOptions {
    /// Closed-form Dirichlet boundaries; log-normal models only.
    pub fn validation() -> Self {
        Self {
            boundary: Boundary::ClosedForm,
            ..Self::default()
        }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_terminal(mut self, terminal: Terminal) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_newton(mut self, newton: bool) -> Self {
        self.newton = newton;
        self
    }
}

/// Summary of one backward solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub lambda: f64,
    pub time_steps: usize,
    pub state_nodes: usize,
    pub dt: f64,
    pub dx: f64,
    pub state_min: f64,
    pub state_max: f64,
    /// `dt max(d^2) / dx^2`.
    pub diffusion_number: f64,
    pub newton: bool,
    pub total_iterations: usize,
    pub max_iterations_per_step: usize,
    /// Largest final Newton residual (zero for the linearised step).
    pub max_residual: f64,
    pub min_value: f64,
    pub max_value: f64,
}

impl SolverDiagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialise")
    }
}

/// State coordinates of the PDE.
#[derive(Debug, Clone, PartialEq)]
enum Coordinates {
    LogVolume {
        v0: f64,
        drift: TimeFunction,
        vol: TimeFunction,
    },
    Noise {
        u_bar: TimeFunction,
        epsilon: f64,
        rho: f64,
        sigma: f64,
    },
}

/// Coefficients frozen over one time step: advection `c0 + c1 x`,
/// squared diffusion `d2`, volume `scale exp(k x)`.
#[derive(Debug, Clone, Copy)]
struct StepCoeffs {
    c0: f64,
    c1: f64,
    d2: f64,
    scale: f64,
    k: f64,
}

impl Coordinates {
    fn from_model(model: &VolumeModel) -> Result<Self> {
        model.validate()?;
        Ok(match model {
            VolumeModel::Constant { v_bar } => Coordinates::LogVolume {
                v0: *v_bar,
                drift: TimeFunction::constant(0.0),
                vol: TimeFunction::constant(0.0),
            },
            VolumeModel::TimeDepBs { v0, drift, vol } => Coordinates::LogVolume {
                v0: *v0,
                drift: drift.clone(),
                vol: vol.clone(),
            },
            VolumeModel::PerturbedOu {
                u_bar,
                epsilon,
                rho,
                sigma,
            } => Coordinates::Noise {
                u_bar: u_bar.clone(),
                epsilon: *epsilon,
                rho: *rho,
                sigma: *sigma,
            },
        })
    }

    fn initial_state(&self) -> f64 {
        match self {
            Coordinates::LogVolume { v0, .. } => v0.ln(),
            Coordinates::Noise { .. } => 0.0,
        }
    }

    fn half_width(&self, grid: &PdeGrid) -> f64 {
        let w = match self {
            Coordinates::LogVolume { drift, vol, .. } => {
                let samples = 256;
                (0..=samples)
                    .map(|i| {
                        let t = grid.horizon * i as f64 / samples as f64;
                        drift.integral(0.0, t).abs() + grid.width_sd * vol.integral_sq(0.0, t).sqrt()
                    })
                    .fold(0.0, f64::max)
            }
            Coordinates::Noise { rho, sigma, .. } => grid.width_sd * ou_variance(*rho, *sigma, grid.horizon).sqrt(),
        };
        w.max(grid.min_half_width)
    }

    fn step(&self, a: f64, b: f64) -> StepCoeffs {
        let h = b - a;
        match self {
            Coordinates::LogVolume { drift, vol, .. } => StepCoeffs {
                c0: drift.integral(a, b) / h,
                c1: 0.0,
                d2: vol.integral_sq(a, b) / h,
                scale: 1.0,
                k: 1.0,
            },
            Coordinates::Noise {
                u_bar,
                epsilon,
                rho,
                sigma,
            } => StepCoeffs {
                c0: 0.0,
                c1: -rho,
                d2: sigma * sigma,
                scale: u_bar.integral(a, b) / h,
                k: *epsilon,
            },
        }
    }

    /// Exponent `k` in `v = scale(t) exp(k x)`.
    fn volume_exponent(&self) -> f64 {
        match self {
            Coordinates::LogVolume { .. } => 1.0,
            Coordinates::Noise { epsilon, .. } => *epsilon,
        }
    }

    fn volume_at(&self, t: f64, x: f64) -> f64 {
        match self {
            Coordinates::LogVolume { .. } => x.exp(),
            Coordinates::Noise { u_bar, epsilon, .. } => u_bar.value(t) * (epsilon * x).exp(),
        }
    }

    fn max_d2(&self, horizon: f64, n_t: usize) -> f64 {
        match self {
            Coordinates::LogVolume { vol, .. } => {
                let dt = horizon / n_t as f64;
                (0..n_t)
                    .map(|i| vol.integral_sq(i as f64 * dt, (i + 1) as f64 * dt) / dt)
                    .fold(0.0, f64::max)
            }
            Coordinates::Noise { sigma, .. } => sigma * sigma,
        }
    }
}

/// Log-normal closed form `W^lambda(t, v) = 1 / (v (int_t^T e^{G(t,s)} ds + e^{G(t,T)} / lambda))`
/// with `G(t, s) = int_t^s (b - sigma^2/2)`. `lambda = infinity` gives the unpenalised value.
pub fn bs_closed_form(drift: &TimeFunction, vol: &TimeFunction, horizon: f64, lambda: f64, t: f64, v: f64) -> f64 {
    let mut cuts = vec![t];
    let mut inner: Vec<f64> = drift.knots_in(t, horizon);
    inner.extend(vol.knots_in(t, horizon));
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    cuts.extend(inner);
    cuts.push(horizon);
    let mut g = 0.0f64;
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let h = hi - lo;
        if h <= 0.0 {
            continue;
        }
        let sig = vol.value(lo);
        let c = drift.value(lo) - 0.5 * sig * sig;
        let piece = if c == 0.0 { h } else { (c * h).exp_m1() / c };
        acc += g.exp() * piece;
        g += c * h;
    }
    let tail = if lambda.is_infinite() { 0.0 } else { g.exp() / lambda };
    1.0 / (v * (acc + tail))
}

/// [`bs_closed_form`] for a log-normal or constant volume model.
pub fn closed_form_w(model: &VolumeModel, horizon: f64, lambda: f64, t: f64, v: f64) -> Result<f64> {
    match Coordinates::from_model(model)? {
        Coordinates::LogVolume { drift, vol, .. } => Ok(bs_closed_form(&drift, &vol, horizon, lambda, t, v)),
        Coordinates::Noise { .. } => Err(VolexError::UnsupportedRegime(
            "closed-form value function exists only for log-normal volume".into(),
        )),
    }
}

/// Value function on the stored time slices.
#[derive(Debug)]
pub struct ValueSurface {
    lambda: f64,
    horizon: f64,
    terminal: Terminal,
    model: VolumeModel,
    coords: Coordinates,
    times: Vec<f64>,
    x_lo: f64,
    dx: f64,
    n_x: usize,
    center: usize,
    /// Row-major `[slice][node]`, slices ordered by increasing time.
    values: Vec<f64>,
    diagnostics: SolverDiagnostics,
    clamped: AtomicUsize,
}

impl ValueSurface {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn model(&self) -> &VolumeModel {
        &self.model
    }

    pub fn diagnostics(&self) -> &SolverDiagnostics {
        &self.diagnostics
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// State node `j` (log volume or noise level).
    pub fn state(&self, j: usize) -> f64 {
        self.x_lo + j as f64 * self.dx
    }

    pub fn states(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.state(j)).collect()
    }

    /// Values on stored slice `i`.
    pub fn slice(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_x..(i + 1) * self.n_x]
    }

    /// Initial state `log v0` or `z = 0`, which is a grid node.
    pub fn initial_state(&self) -> f64 {
        self.coords.initial_state()
    }

    /// `W(0, x0)` read off the grid node.
    pub fn initial_value(&self) -> f64 {
        self.slice(0)[self.center]
    }

    /// `J^lambda = X0^2 W(0, x0)`.
    pub fn j_lambda(&self, x0: f64) -> f64 {
        x0 * x0 * self.initial_value()
    }

    /// Volume at time `t` and state `x`.
    pub fn volume_at(&self, t: f64, x: f64) -> f64 {
        self.coords.volume_at(t, x)
    }

    /// State of `path` at node `k`.
    pub fn state_of(&self, path: &VolumePath, k: usize) -> f64 {
        match self.coords {
            Coordinates::LogVolume { .. } => path.volume()[k].ln(),
            Coordinates::Noise { .. } => path.noise()[k],
        }
    }

    /// `W(t, x)`. Interpolates `exp(k x) W` linearly in the state (exact for
    /// `W = f(t) / v`) and linearly in time; clamps outside the state range.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let k = self.coords.volume_exponent();
        let hi = self.state(self.n_x - 1);
        let xc = if x < self.x_lo || x > hi {
            if self.clamped.fetch_add(1, Ordering::Relaxed) == 0 {
                log::warn!("value surface: state {x} outside [{}, {hi}], clamping", self.x_lo);
            }
            x.clamp(self.x_lo, hi)
        } else {
            x
        };
        let pos = (xc - self.x_lo) / self.dx;
        let j = (pos.floor() as usize).min(self.n_x - 2);
        let w = pos - j as f64;
        let (xa, xb) = (self.state(j), self.state(j + 1));
        let scaled =
            |slice: &[f64]| (1.0 - w) * slice[j] * (k * (xa - xc)).exp() + w * slice[j + 1] * (k * (xb - xc)).exp();
        let tc = t.clamp(0.0, self.horizon);
        let s = self
            .times
            .partition_point(|&ti| ti <= tc)
            .clamp(1, self.times.len() - 1)
            - 1;
        let (ta, tb) = (self.times[s], self.times[s + 1]);
        let a = scaled(self.slice(s));
        if tc <= ta {
            return a;
        }
        let b = scaled(self.slice(s + 1));
        let u = (tc - ta) / (tb - ta);
        (1.0 - u) * a + u * b
    }

    /// Number of clamped state lookups so far.
    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Writes `t,y,W` rows; `y` is the PDE state (log volume, or noise for OU volume).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "y", "W"])?;
        for (i, &t) in self.times.iter().enumerate() {
            for (j, &val) in self.slice(i).iter().enumerate() {
                w.serialize((t, self.state(j), val))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Solves for `W^lambda` with default options.
pub fn solve_w_lambda(model: &VolumeModel, lambda: f64, grid: &PdeGrid) -> Result<ValueSurface> {
    solve_w_lambda_with(model, lambda, grid, &SolverOptions::default())
}

pub fn solve_w_lambda_with(
    model: &VolumeModel,
    lambda: f64,
    grid: &PdeGrid,
    opts: &SolverOptions,
) -> Result<ValueSurface> {
    grid.validate()?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(VolexError::InvalidParameter(format!(
            "lambda must be finite and > 0, got {lambda}"
        )));
    }
    if !(0.0..=1.0).contains(&opts.theta) {
        return Err(VolexError::InvalidParameter(format!(
            "theta must lie in [0, 1], got {}",
            opts.theta
        )));
    }
    let coords = Coordinates::from_model(model)?;
    if opts.boundary == Boundary::ClosedForm
        && (!matches!(coords, Coordinates::LogVolume { .. }) || opts.terminal != Terminal::PerVolume)
    {
        return Err(VolexError::InvalidParameter(
            "closed-form boundaries need log-normal volume and the per-volume terminal".into(),
        ));
    }

    let n_x = grid.n_y;
    let center = (n_x - 1) / 2;
    let x0 = coords.initial_state();
    let dx = coords.half_width(grid) / center as f64;
    let x_lo = x0 - center as f64 * dx;
    let xs: Vec<f64> = (0..n_x).map(|j| x0 + (j as f64 - center as f64) * dx).collect();
    let n_t = grid.n_t;
    let dt = grid.dt();
    let theta = opts.theta;

    let max_d2 = coords.max_d2(grid.horizon, n_t);
    let diffusion_number = dt * max_d2 / (dx * dx);
    if theta < 0.5 && diffusion_number * (1.0 - 2.0 * theta) > 0.5 {
        return Err(VolexError::InvalidParameter(format!(
            "time step too large for theta = {theta}: dt d^2/dx^2 = {diffusion_number:.3e}"
        )));
    }
    if diffusion_number > 1e4 {
        log::warn!("PDE diffusion number {diffusion_number:.3e} is large; expect damped oscillations");
    }

    let node_time = |i: usize| {
        if i == n_t {
            grid.horizon
        } else {
            i as f64 * dt
        }
    };
    let cf = |t: f64, x: f64| match &coords {
        Coordinates::LogVolume { drift, vol, .. } => bs_closed_form(drift, vol, grid.horizon, lambda, t, x.exp()),
        Coordinates::Noise { .. } => unreachable!("closed form checked above"),
    };

    let mut w: Vec<f64> = xs
        .iter()
        .map(|&x| match opts.terminal {
            Terminal::PerVolume => lambda / coords.volume_at(grid.horizon, x),
            Terminal::Flat => lambda,
        })
        .collect();

    let n_saved = n_t / grid.save_every + 1 + usize::from(!n_t.is_multiple_of(grid.save_every));
    let mut saved: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n_saved);
    saved.push((grid.horizon, w.clone()));

    let mut lo = vec![0.0; n_x];
    let mut di = vec![0.0; n_x];
    let mut up = vec![0.0; n_x];
    let mut rhs = vec![0.0; n_x];
    let mut next = vec![0.0; n_x];
    let mut scratch = vec![0.0; n_x];
    // Generator stencil (lower, diagonal, upper) per node.
    let mut gen = vec![(0.0, 0.0, 0.0); n_x];
    let mut vol_node = vec![0.0; n_x];
    let mut reaction_row = vec![true; n_x];

    let mut total_iterations = 0usize;
    let mut max_iterations = 0usize;
    let mut max_residual = 0.0f64;
    let mut min_value = w.iter().copied().fold(f64::INFINITY, f64::min);
    let mut max_value = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    for i in (0..n_t).rev() {
        let (ta, tb) = (node_time(i), node_time(i + 1));
        let sc = coords.step(ta, tb);
        let h = tb - ta;
        for j in 0..n_x {
            let x = xs[j];
            let a = sc.c0 + sc.c1 * x;
            vol_node[j] = sc.scale * (sc.k * x).exp();
            gen[j] = if j == 0 || j == n_x - 1 {
                // One-sided advection into the domain, no diffusion.
                if j == 0 {
                    (0.0, -a / dx, a / dx)
                } else {
                    (-a / dx, a / dx, 0.0)
                }
            } else {
                let diff = 0.5 * sc.d2 / (dx * dx);
                let adv = 0.5 * a / dx;
                (diff - adv, -2.0 * diff, diff + adv)
            };
        }

        // Right-hand side (I + (1 - theta) dt A) W^{i+1}.
        for j in 0..n_x {
            let (l, d, u) = gen[j];
            let mut acc = d * w[j];
            if j > 0 {
                acc += l * w[j - 1];
            }
            if j + 1 < n_x {
                acc += u * w[j + 1];
            }
            rhs[j] = w[j] + (1.0 - theta) * h * acc;
        }
        // Linear part (I - theta dt A); boundary rows overwritten below.
        for j in 0..n_x {
            let (l, d, u) = gen[j];
            lo[j] = -theta * h * l;
            di[j] = 1.0 - theta * h * d;
            up[j] = -theta * h * u;
            reaction_row[j] = true;
        }
        match opts.boundary {
            Boundary::ZeroCurvature => {}
            Boundary::ClosedForm => {
                for &j in &[0, n_x - 1] {
                    lo[j] = 0.0;
                    di[j] = 1.0;
                    up[j] = 0.0;
                    rhs[j] = cf(ta, xs[j]);
                    reaction_row[j] = false;
                }
            }
            Boundary::ScaledNeumann => {
                let r = (sc.k * dx).exp();
                lo[0] = 0.0;
                di[0] = 1.0;
                up[0] = -r;
                rhs[0] = 0.0;
                lo[n_x - 1] = -1.0 / r;
                di[n_x - 1] = 1.0;
                up[n_x - 1] = 0.0;
                rhs[n_x - 1] = 0.0;
                reaction_row[0] = false;
                reaction_row[n_x - 1] = false;
            }
        }

        if !opts.newton {
            for j in 0..n_x {
                if reaction_row[j] {
                    di[j] += h * vol_node[j] * w[j];
                }
            }
            thomas(&lo, &di, &up, &rhs, &mut next, &mut scratch).map_err(|reason| VolexError::Solver {
                step: i,
                t: ta,
                reason,
            })?;
            total_iterations += 1;
            max_iterations = max_iterations.max(1);
        } else {
            // Trapezoidal reaction: theta v W_i^2 + (1 - theta) v W_{i+1}^2.
            for j in 0..n_x {
                if reaction_row[j] {
                    rhs[j] -= (1.0 - theta) * h * vol_node[j] * w[j] * w[j];
                }
            }
            next.copy_from_slice(&w);
            let mut jac_di = vec![0.0; n_x];
            let mut resid = vec![0.0; n_x];
            let mut delta = vec![0.0; n_x];
            let mut iters = 0;
            loop {
                iters += 1;
                for j in 0..n_x {
                    let mut r = di[j] * next[j] - rhs[j];
                    if j > 0 {
                        r += lo[j] * next[j - 1];
                    }
                    if j + 1 < n_x {
                        r += up[j] * next[j + 1];
                    }
                    jac_di[j] = di[j];
                    if reaction_row[j] {
                        r += theta * h * vol_node[j] * next[j] * next[j];
                        jac_di[j] += 2.0 * theta * h * vol_node[j] * next[j];
                    }
                    resid[j] = -r;
                }
                thomas(&lo, &jac_di, &up, &resid, &mut delta, &mut scratch).map_err(|reason| VolexError::Solver {
                    step: i,
                    t: ta,
                    reason,
                })?;
                let scale = next.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                let step_size = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for j in 0..n_x {
                    next[j] += delta[j];
                }
                if step_size <= NEWTON_TOL * scale {
                    let final_res = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    max_residual = max_residual.max(final_res);
                    break;
                }
                if iters >= NEWTON_MAX_ITER || !step_size.is_finite() {
                    return Err(VolexError::Solver {
                        step: i,
                        t: ta,
                        reason: format!(
                            "Newton did not converge in {iters} iterations (last update {step_size:.3e}, scale {scale:.3e})"
                        ),
                    });
                }
            }
            total_iterations += iters;
            max_iterations = max_iterations.max(iters);
        }

        let slice_max = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slice_min = next.iter().copied().fold(f64::INFINITY, f64::min);
        if !(slice_max.is_finite() && slice_min.is_finite()) {
            return Err(VolexError::Solver {
                step: i,
                t: ta,
                reason: "non-finite value".into(),
            });
        }
        if slice_min < -1e-12 * slice_max.abs() {
            return Err(VolexError::Solver {
                step: i,
                t: ta,
                reason: format!("negative value {slice_min:.3e} (max {slice_max:.3e})"),
            });
        }
        min_value = min_value.min(slice_min);
        max_value = max_value.max(slice_max);
        std::mem::swap(&mut w, &mut next);
        if i % grid.save_every == 0 {
            saved.push((ta, w.clone()));
        }
    }

    saved.reverse();
    let times: Vec<f64> = saved.iter().map(|(t, _)| *t).collect();
    let mut values = Vec::with_capacity(saved.len() * n_x);
    for (_, s) in &saved {
        values.extend_from_slice(s);
    }

    let diagnostics = SolverDiagnostics {
        lambda,
        time_steps: n_t,
        state_nodes: n_x,
        dt,
        dx,
        state_min: xs[0],
        state_max: xs[n_x - 1],
        diffusion_number,
        newton: opts.newton,
        total_iterations,
        max_iterations_per_step: max_iterations,
        max_residual,
        min_value,
        max_value,
    };
    Ok(ValueSurface {
        lambda,
        horizon: grid.horizon,
        terminal: opts.terminal,
        model: model.clone(),
        coords,
        times,
        x_lo,
        dx,
        n_x,
        center,
        values,
        diagnostics,
        clamped: AtomicUsize::new(0),
    })
}

/// Thomas algorithm; `lo[0]` and `up[n-1]` are ignored.
fn thomas(
    lo: &[f64],
    di: &[f64],
    up: &[f64],
    rhs: &[f64],
    out: &mut [f64],
    c: &mut [f64],
) -> std::result::Result<(), String> {
    let n = di.len();
    let mut denom = di[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err("zero pivot in tridiagonal solve at row 0".into());
    }
    c[0] = up[0] / denom;
    out[0] = rhs[0] / denom;
    for j in 1..n {
        denom = di[j] - lo[j] * c[j - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(format!("zero pivot in tridiagonal solve at row {j}"));
        }
        c[j] = if j + 1 < n { up[j] / denom } else { 0.0 };
        out[j] = (rhs[j] - lo[j] * out[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        out[j] -= c[j] * out[j + 1];
    }
    Ok(())
}

/// Feedback schedule `x_k = X_k v_k W(t_k, state_k)` with explicit Euler
/// holdings. The per-step fraction sold is capped at one. `W` is interpolated
/// linearly in time between stored slices, so surfaces thinned with
/// `save_every > 1` bias the rule.
pub fn penalized_rate_path(surface: &ValueSurface, path: &VolumePath, x0: f64) -> Result<ExecutionSchedule> {
    let grid = *path.grid();
    if (grid.horizon() - surface.horizon()).abs() > 1e-12 * surface.horizon() {
        return Err(VolexError::Structural(format!(
            "path horizon {} differs from surface horizon {}",
            grid.horizon(),
            surface.horizon()
        )));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let v = path.volume();
    let mut rates = Vec::with_capacity(n + 1);
    let mut holdings = Vec::with_capacity(n + 1);
    let mut x = x0;
    for (k, &vk) in v.iter().enumerate().take(n + 1) {
        holdings.push(x);
        let speed = vk * surface.value(grid.node(k), surface.state_of(path, k));
        let speed = if k < n { speed.min(1.0 / dt) } else { speed };
        let rate = x * speed;
        rates.push(rate);
        if k < n {
            x -= rate * dt;
        }
    }
    Ok(ExecutionSchedule::from_parts(grid, rates, holdings))
}

/// `int x^2 / v dt` plus the terminal penalty of the surface.
pub fn penalized_cost(surface: &ValueSurface, schedule: &ExecutionSchedule, path: &VolumePath) -> Result<f64> {
    let running = rate_cost(schedule.rates(), path.volume(), schedule.grid())?;
    let xt = schedule.terminal_holdings();
    let penalty = match surface.terminal() {
        Terminal::PerVolume => surface.lambda() * xt * xt / path.volume()[schedule.grid().n_steps()],
        Terminal::Flat => surface.lambda() * xt * xt,
    };
    Ok(running + penalty)
}

/// One point of a penalty sweep.
#[derive(Debug)]
pub struct LambdaPoint {
    pub lambda: f64,
    /// `X0^2 W^lambda(0, x0)`.
    pub j: f64,
    pub surface: ValueSurface,
}

#[derive(Debug)]
pub struct LambdaSweep {
    pub x0: f64,
    pub points: Vec<LambdaPoint>,
    /// Limit `lambda -> infinity` by polynomial extrapolation in `1/lambda`
    /// through the last three points.
    pub extrapolated: f64,
}

impl LambdaSweep {
    /// Whether `J^lambda` is non-decreasing along the sweep.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|p| p[1].j >= p[0].j)
    }

    /// Writes `lambda,J` rows followed by an `inf` row with the extrapolated limit.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "J"])?;
        for p in &self.points {
            w.serialize((p.lambda, p.j))?;
        }
        w.serialize((f64::INFINITY, self.extrapolated))?;
        w.flush()?;
        Ok(())
    }
}

/// Solves for every penalty in `lambdas` (in parallel) and extrapolates `J^lambda`.
pub fn lambda_sweep(
    model: &VolumeModel,
    lambdas: &[f64],
    x0: f64,
    grid: &PdeGrid,
    opts: &SolverOptions,
) -> Result<LambdaSweep> {
    if lambdas.is_empty() {
        return Err(VolexError::Config("lambda list is empty".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(VolexError::Config(format!(
            "lambda list must be strictly increasing, got {lambdas:?}"
        )));
    }
    let points = lambdas
        .par_iter()
        .map(|&lambda| {
            let surface = solve_w_lambda_with(model, lambda, grid, opts)?;
            Ok(LambdaPoint {
                lambda,
                j: surface.j_lambda(x0),
                surface,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tail = &points[points.len().saturating_sub(3)..];
    let h: Vec<f64> = tail.iter().map(|p| 1.0 / p.lambda).collect();
    let j: Vec<f64> = tail.iter().map(|p| p.j).collect();
    Ok(LambdaSweep {
        x0,
        extrapolated: richardson_limit(&h, &j),
        points,
    })
}

/// Value at `h = 0` of the interpolating polynomial through `(h_i, y_i)` (Neville).
pub fn richardson_limit(h: &[f64], y: &[f64]) -> f64 {
    assert_eq!(h.len(), y.len());
    let mut p = y.to_vec();
    let n = p.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (h[i + m] * p[i] - h[i] * p[i + 1]) / (h[i + m] - h[i]);
        }
    }
    p[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;

    fn gbm() -> VolumeModel {
        VolumeModel::gbm(100.0, 0.5, 0.3).unwrap()
    }

    #[test]
    fn log_coordinate_generator_matches_volume_generator() {
        // For W = v^-p the v-generator (b + s^2/2) v W_v + s^2/2 v^2 W_vv equals
        // (-p b + p^2 s^2 / 2) W; the discrete y-stencil must reproduce it to O(dy^2).
        let (b, s, p) = (0.4, 0.3, 1.7);
        let dy = 1e-3;
        let y = 4.2f64;
        let f = |y: f64| (-p * y).exp();
        let d1 = (f(y + dy) - f(y - dy)) / (2.0 * dy);
        let d2 = (f(y + dy) - 2.0 * f(y) + f(y - dy)) / (dy * dy);
        let y_gen = b * d1 + 0.5 * s * s * d2;
        let v = y.exp();
        let bt = b + 0.5 * s * s;
        let v_gen = bt * v * (-p * v.powf(-p - 1.0)) + 0.5 * s * s * v * v * (p * (p + 1.0) * v.powf(-p - 2.0));
        assert!((y_gen - v_gen).abs() < 1e-6 * v_gen.abs());
        assert!((v_gen - (-p * b + 0.5 * p * p * s * s) * f(y)).abs() < 1e-12 * f(y));
    }

    #[test]
    fn deterministic_volume_oracle() {
        let m = VolumeModel::constant(100.0).unwrap();
        let g = PdeGrid::new(1.0, 50, 21).unwrap();
        let s = solve_w_lambda(&m, 10.0, &g).unwrap();
        assert!((s.initial_value() - 1.0 / 110.0).abs() < 1e-15);
        assert!((s.initial_value() * 100.0 - 1.0 / 1.1).abs() < 1e-13);
        assert!((s.j_lambda(10.0) - 0.9090909090909091).abs() < 1e-12);
    }

    #[test]
    fn deterministic_rate_path_telescopes() {
        let m = VolumeModel::constant(100.0).unwrap();
        let g = PdeGrid::new(1.0, 100, 21).unwrap();
        let s = solve_w_lambda(&m, 10.0, &g).unwrap();
        let tg = TimeGrid::new(1.0, 100).unwrap();
        let path = m.sample_path(&tg, 1);
        let sched = penalized_rate_path(&s, &path, 10.0).unwrap();
        assert!((sched.rates()[0] - 10.0 / 1.1).abs() < 1e-10);
        assert!((sched.terminal_holdings() - 10.0 / 11.0).abs() < 1e-10);
        let cost = penalized_cost(&s, &sched, &path).unwrap();
        assert!((cost - s.j_lambda(10.0)).abs() < 1e-10);
    }

    #[test]
    fn closed_form_constant_coefficients() {
        // b = sigma^2 / 2: W = 1 / (v (T - t + 1/lambda))
        let drift = TimeFunction::constant(0.045);
        let vol = TimeFunction::constant(0.3);
        let w = bs_closed_form(&drift, &vol, 1.0, 10.0, 0.25, 50.0);
        assert!((w - 1.0 / (50.0 * 0.85)).abs() < 1e-15);
        let inf = bs_closed_form(&drift, &vol, 1.0, f64::INFINITY, 0.0, 100.0);
        assert!((inf - 0.01).abs() < 1e-16);
    }

    #[test]
    fn closed_form_piecewise_matches_quadrature() {
        let drift = TimeFunction::table(vec![0.0, 0.3, 0.7], vec![0.5, -0.2, 0.1]).unwrap();
        let vol = TimeFunction::table(vec![0.0, 0.5], vec![0.3, 0.1]).unwrap();
        let t = 0.1;
        let c = |s: f64| drift.value(s) - 0.5 * vol.value(s).powi(2);
        let g = |s: f64| crate::quad::simpson_fn(c, t, s, 20000);
        let integral = crate::quad::simpson_fn(|s| g(s).exp(), t, 1.0, 400);
        let expected = 1.0 / (80.0 * (integral + g(1.0).exp() / 5.0));
        let got = bs_closed_form(&drift, &vol, 1.0, 5.0, t, 80.0);
        assert!((got - expected).abs() < 1e-5 * expected, "{got} vs {expected}");
    }

    #[test]
    fn pde_matches_closed_form() {
        let m = gbm();
        let g = PdeGrid::new(1.0, 400, 201).unwrap();
        for &lambda in &[1.0, 10.0, 100.0] {
            let s = solve_w_lambda_with(&m, lambda, &g, &SolverOptions::validation()).unwrap();
            let exact = closed_form_w(&m, 1.0, lambda, 0.0, 100.0).unwrap();
            let rel = (s.initial_value() - exact).abs() / exact;
            assert!(rel < 1e-4, "lambda = {lambda}: rel err {rel:.3e}");
        }
    }

    #[test]
    fn newton_mode_agrees() {
        let m = gbm();
        let g = PdeGrid::new(1.0, 400, 101).unwrap();
        let lin = solve_w_lambda(&m, 10.0, &g).unwrap();
        let newton = solve_w_lambda_with(&m, 10.0, &g, &SolverOptions::default().with_newton(true)).unwrap();
        let exact = closed_form_w(&m, 1.0, 10.0, 0.0, 100.0).unwrap();
        assert!(newton.diagnostics().max_iterations_per_step >= 2);
        assert!((newton.initial_value() - exact).abs() < 3e-4 * exact);
        assert!((lin.initial_value() - exact).abs() < 3e-4 * exact);
    }

    #[test]
    fn ou_zero_noise_reduces_to_ode() {
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), 0.0, 2.0, 0.3).unwrap();
        let g = PdeGrid::new(1.0, 100, 41).unwrap();
        let s = solve_w_lambda_with(
            &m,
            10.0,
            &g,
            &SolverOptions::default().with_boundary(Boundary::ZeroCurvature),
        )
        .unwrap();
        assert!((s.initial_value() - 1.0 / (100.0 * 1.1)).abs() < 1e-15);
        let flat = solve_w_lambda_with(&m, 10.0, &g, &SolverOptions::default().with_terminal(Terminal::Flat)).unwrap();
        assert!((flat.initial_value() - 1.0 / (100.0 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn closed_form_boundary_rejected_for_ou() {
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), 0.3, 2.0, 0.3).unwrap();
        let g = PdeGrid::new(1.0, 10, 11).unwrap();
        let err = solve_w_lambda_with(&m, 1.0, &g, &SolverOptions::validation()).unwrap_err();
        assert!(matches!(err, VolexError::InvalidParameter(_)));
    }

    #[test]
    fn explicit_step_misconfiguration_reported() {
        let g = PdeGrid::new(1.0, 2, 401).unwrap();
        let opts = SolverOptions {
            theta: 0.0,
            ..SolverOptions::default()
        };
        assert!(matches!(
            solve_w_lambda_with(&gbm(), 1.0, &g, &opts),
            Err(VolexError::InvalidParameter(_))
        ));
    }

    #[test]
    fn richardson_recovers_quadratic() {
        let h = [0.25, 0.125, 0.0625];
        let y: Vec<f64> = h.iter().map(|h| 3.0 - 2.0 * h + 5.0 * h * h).collect();
        assert!((richardson_limit(&h, &y) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_rejects_bad_lists() {
        let g = PdeGrid::new(1.0, 10, 11).unwrap();
        let opts = SolverOptions::default();
        assert!(matches!(
            lambda_sweep(&gbm(), &[], 10.0, &g, &opts),
            Err(VolexError::Config(_))
        ));
        assert!(matches!(
            lambda_sweep(&gbm(), &[4.0, 1.0], 10.0, &g, &opts),
            Err(VolexError::Config(_))
        ));
    }

    #[test]
    fn surface_csv_has_header() {
        let m = VolumeModel::constant(100.0).unwrap();
        let g = PdeGrid::new(1.0, 4, 5).unwrap();
        let s = solve_w_lambda(&m, 1.0, &g).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,y,W\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 5);
    }
}
