//! Second-order small-noise expansion of the value function.
//!
//! With volume `v_t = u_bar_t exp(epsilon Z_t)` the value function expands as
//! `W = 1/(U_T - U_t) + epsilon I1(t, z) + epsilon^2 I2(t, z) + O(epsilon^3)`,
//! where `U_t = int_0^t u_bar`. The coefficients are Feynman-Kac integrals of
//! the noise moments `m(s, t, z) = E[Z_s | Z_t = z]` and
//! `A1(s, t, z) = E[Z_s^2 | Z_t = z]`.
//!
//! Two evaluation routes exist. The OU route uses the closed forms of the
//! Ornstein-Uhlenbeck moments with exact inner integrals; the generic route
//! only needs a [`NoiseMoments`] implementation whose conditional mean is
//! affine in `z`, and evaluates every integral by composite Simpson. They are
//! cross-checked against each other in the tests.
//!
//! A finite terminal penalty `lambda` is supported by shifting `U_T` to
//! `U_T + 1/lambda`; `lambda = infinity` is the default.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::model::TimeGrid;
use crate::quad::{simpson, simpson_fn};
use crate::timefn::TimeFunction;

/// Conditional moments of the noise process started at `Z_t = z`.
pub trait NoiseMoments: Sync {
    /// `E[Z_s | Z_t = z]` for `s >= t`; must be affine in `z`.
    fn mean(&self, s: f64, t: f64, z: f64) -> f64;
    /// `E[Z_s^2 | Z_t = z]`.
    fn second_moment(&self, s: f64, t: f64, z: f64) -> f64;
}

/// Ornstein-Uhlenbeck noise `dZ = -rho Z dt + sigma dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub rho: f64,
    pub sigma: f64,
}

impl OuNoise {
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        if !(rho > 0.0 && sigma > 0.0 && rho.is_finite() && sigma.is_finite()) {
            return Err(VolexError::InvalidParameter(format!(
                "OU noise needs rho > 0 and sigma > 0, got rho = {rho}, sigma = {sigma}"
            )));
        }
        Ok(Self { rho, sigma })
    }

    /// Stationary standard deviation `sigma / sqrt(2 rho)`.
    pub fn stationary_sd(&self) -> f64 {
        self.sigma / (2.0 * self.rho).sqrt()
    }

    fn variance(&self, dt: f64) -> f64 {
        crate::volume::ou_variance(self.rho, self.sigma, dt)
    }
}

impl NoiseMoments for OuNoise {
    fn mean(&self, s: f64, t: f64, z: f64) -> f64 {
        z * (-self.rho * (s - t)).exp()
    }

    fn second_moment(&self, s: f64, t: f64, z: f64) -> f64 {
        let m = self.mean(s, t, z);
        m * m + self.variance(s - t)
    }
}

/// Baseline volume, horizon, noise size and quadrature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoeffs {
    u_bar: TimeFunction,
    horizon: f64,
    epsilon: f64,
    /// `1 / lambda`; zero for the unpenalised limit.
    terminal_offset: f64,
    /// Simpson intervals used for an integral over the whole horizon.
    quad_intervals: usize,
}

impl ExpansionCoeffs {
    pub fn new(u_bar: TimeFunction, horizon: f64, epsilon: f64) -> Result<Self> {
        if !(u_bar.min_value() > 0.0) {
            return Err(VolexError::InvalidParameter("u_bar must be positive".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(VolexError::InvalidParameter(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(VolexError::InvalidParameter(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        Ok(Self {
            u_bar,
            horizon,
            epsilon,
            terminal_offset: 0.0,
            quad_intervals: 2000,
        })
    }

    /// Expansion of the penalised problem with terminal value `W(T) = lambda`.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(VolexError::InvalidParameter(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        self.terminal_offset = if lambda.is_infinite() { 0.0 } else { 1.0 / lambda };
        Ok(self)
    }

    pub fn with_quadrature(mut self, intervals: usize) -> Self {
        self.quad_intervals = intervals.max(2);
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn u_bar(&self) -> &TimeFunction {
        &self.u_bar
    }

    /// `U_T - U_t + 1/lambda`.
    fn remaining(&self, t: f64) -> f64 {
        self.u_bar.integral(t, self.horizon) + self.terminal_offset
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let ok = if self.terminal_offset > 0.0 {
            (0.0..=self.horizon).contains(&t)
        } else {
            t >= 0.0 && t < self.horizon
        };
        if ok {
            Ok(())
        } else {
            Err(VolexError::Domain(format!(
                "expansion evaluated at t = {t}; needs 0 <= t < T = {} (t = T only with finite lambda)",
                self.horizon
            )))
        }
    }

    fn intervals_for(&self, t: f64) -> usize {
        let frac = (self.horizon - t) / self.horizon;
        ((self.quad_intervals as f64 * frac).ceil() as usize).max(2)
    }

    /// Base term `1 / (U_T - U_t + 1/lambda)`.
    pub fn base_w0(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(1.0 / self.remaining(t))
    }

    /// `int_s^T exp(-rho (r - s)) u_bar_r dr`, exact.
    fn ou_kernel(&self, rho: f64, s: f64) -> f64 {
        self.u_bar.exp_weighted_integral(s, self.horizon, rho, s)
    }

    /// `U_hat_s = 1 - K(s) / (U_T - U_s + 1/lambda)` with the `s -> T` limit.
    fn u_hat(&self, rho: f64, s: f64) -> f64 {
        let r = self.remaining(s);
        if r <= 0.0 || s >= self.horizon {
            // K(s)/r -> 1 without penalty, K(T) = 0 with penalty.
            return if self.terminal_offset > 0.0 { 1.0 } else { 0.0 };
        }
        1.0 - self.ou_kernel(rho, s) / r
    }

    /// First-order coefficient, OU closed form.
    pub fn i1_ou(&self, noise: &OuNoise, t: f64, z: f64) -> Result<f64> {
        self.check_time(t)?;
        let r = self.remaining(t);
        Ok(-z * self.ou_kernel(noise.rho, t) / (r * r))
    }

    /// `(P, Q)` with `I2(t, z) = P z^2 + Q`, OU closed form.
    ///
    /// With a finite penalty `U_hat` has a layer of width `1/(lambda u_bar)` at
    /// the horizon, so the outer integral runs on `s = T - (T - t)(1 - u)^2`,
    /// uniform in `u`.
    pub fn i2_ou_parts(&self, noise: &OuNoise, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        let (rho, sigma) = (noise.rho, noise.sigma);
        let n = self.intervals_for(t);
        let span = self.horizon - t;
        let du = 1.0 / n as f64;
        let mut pz = Vec::with_capacity(n + 1);
        let mut q = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let rest = 1.0 - i as f64 * du;
            let s = if i == n {
                self.horizon
            } else {
                self.horizon - span * rest * rest
            };
            let jac = 2.0 * span * rest;
            let uh = self.u_hat(rho, s);
            let weight = (uh * uh - 0.5) * self.u_bar.value(s) * jac;
            let lag = s - t;
            pz.push((-2.0 * rho * lag).exp() * weight);
            q.push(sigma * sigma / (2.0 * rho) * (-(-2.0 * rho * lag).exp_m1()) * weight);
        }
        let r = self.remaining(t);
        let scale = -1.0 / (r * r);
        Ok((scale * simpson(&pz, du), scale * simpson(&q, du)))
    }

    /// Second-order coefficient, OU closed form.
    pub fn i2_ou(&self, noise: &OuNoise, t: f64, z: f64) -> Result<f64> {
        let (p, q) = self.i2_ou_parts(noise, t)?;
        Ok(p * z * z + q)
    }

    /// First-order coefficient by quadrature of the conditional mean.
    pub fn i1_generic(&self, moments: &dyn NoiseMoments, t: f64, z: f64) -> Result<f64> {
        self.check_time(t)?;
        let n = self.intervals_for(t);
        let u_bar = &self.u_bar;
        let mut bad = None;
        let integral = simpson_fn(
            |s| {
                let v = moments.mean(s, t, z) * u_bar.value(s);
                if !v.is_finite() && bad.is_none() {
                    bad = Some(s);
                }
                v
            },
            t,
            self.horizon,
            n,
        );
        if let Some(s) = bad {
            return Err(VolexError::Quadrature(format!(
                "non-finite mean integrand in I1 at s = {s} (t = {t}, z = {z})"
            )));
        }
        let r = self.remaining(t);
        Ok(-integral / (r * r))
    }

    /// Second-order coefficient by quadrature of `A1/2 + A2 - 2 A3`.
    ///
    /// `A2` and `A3` contain an expectation over `Z_s`; because the mean is
    /// affine in its starting point, `int_s^T m(r, s, Z) u_bar_r dr = Phi(s) Z + Psi(s)`
    /// and the expectation reduces to the first two moments of `Z_s`.
    pub fn i2_generic(&self, moments: &dyn NoiseMoments, t: f64, z: f64) -> Result<f64> {
        let inner = self.affine_inner(moments, t)?;
        self.i2_generic_with(moments, &inner, t, z)
    }

    fn affine_inner(&self, moments: &dyn NoiseMoments, t: f64) -> Result<AffineInner> {
        self.check_time(t)?;
        let n = self.intervals_for(t);
        let h = (self.horizon - t) / n as f64;
        let nodes: Vec<f64> = (0..=n)
            .map(|i| if i == n { self.horizon } else { t + i as f64 * h })
            .collect();
        let u: Vec<f64> = nodes.iter().map(|&s| self.u_bar.value(s)).collect();
        let mut phi_ratio = Vec::with_capacity(n + 1);
        let mut psi_ratio = Vec::with_capacity(n + 1);
        let mut slope = vec![0.0; n + 1];
        let mut level = vec![0.0; n + 1];
        for j in 0..=n {
            let s = nodes[j];
            for i in j..=n {
                let m0 = moments.mean(nodes[i], s, 0.0);
                let m1 = moments.mean(nodes[i], s, 1.0);
                slope[i] = (m1 - m0) * u[i];
                level[i] = m0 * u[i];
            }
            let r = self.remaining(s);
            let (pr, qr) = if j == n && self.terminal_offset == 0.0 {
                // Phi / r and Psi / r tend to the integrands at r = s = T.
                let m0 = moments.mean(s, s, 0.0);
                (moments.mean(s, s, 1.0) - m0, m0)
            } else {
                (simpson(&slope[j..], h) / r, simpson(&level[j..], h) / r)
            };
            if !(pr.is_finite() && qr.is_finite()) {
                return Err(VolexError::Quadrature(format!(
                    "non-finite inner integral at s = {s} (t = {t})"
                )));
            }
            phi_ratio.push(pr);
            psi_ratio.push(qr);
        }
        Ok(AffineInner {
            nodes,
            h,
            u,
            phi_ratio,
            psi_ratio,
        })
    }

    fn i2_generic_with(&self, moments: &dyn NoiseMoments, inner: &AffineInner, t: f64, z: f64) -> Result<f64> {
        let mut integrand = Vec::with_capacity(inner.nodes.len());
        for (j, &s) in inner.nodes.iter().enumerate() {
            let m = moments.mean(s, t, z);
            let a1 = moments.second_moment(s, t, z);
            let (p, q) = (inner.phi_ratio[j], inner.psi_ratio[j]);
            let a2 = a1 * p * p + 2.0 * m * p * q + q * q;
            let a3 = a1 * p + m * q;
            let v = (0.5 * a1 + a2 - 2.0 * a3) * inner.u[j];
            if !v.is_finite() {
                return Err(VolexError::Quadrature(format!(
                    "non-finite I2 integrand at s = {s} (t = {t}, z = {z}): A1 = {a1}, m = {m}"
                )));
            }
            integrand.push(v);
        }
        let r = self.remaining(t);
        Ok(-simpson(&integrand, inner.h) / (r * r))
    }

    /// `W0 + eps I1 + eps^2 I2` with the OU closed forms.
    pub fn w_eps(&self, noise: &OuNoise, t: f64, z: f64) -> Result<f64> {
        let w0 = self.base_w0(t)?;
        if self.epsilon == 0.0 {
            return Ok(w0);
        }
        let e = self.epsilon;
        Ok(w0 + e * self.i1_ou(noise, t, z)? + e * e * self.i2_ou(noise, t, z)?)
    }

    /// Per-node OU coefficients on a simulation grid. Entries at `t = T`
    /// are not finite without a terminal penalty and must not be used.
    pub fn ou_table(&self, noise: &OuNoise, grid: &TimeGrid) -> Result<ExpansionTable> {
        self.check_grid(grid)?;
        let n = grid.n_steps();
        let dt = grid.dt();
        let rho = noise.rho;
        // Exact kernel K(t_j) and remaining mass R(t_j) by backward recursion.
        let mut kernel = vec![0.0; n + 1];
        let mut remaining = vec![self.terminal_offset; n + 1];
        let decay = (-rho * dt).exp();
        for j in (0..n).rev() {
            let (a, b) = (grid.node(j), grid.node(j + 1));
            kernel[j] = decay * kernel[j + 1] + self.u_bar.exp_weighted_integral(a, b, rho, a);
            remaining[j] = remaining[j + 1] + self.u_bar.integral(a, b);
        }
        let u: Vec<f64> = grid.nodes().map(|t| self.u_bar.value(t)).collect();
        let weight: Vec<f64> = (0..=n)
            .map(|j| {
                let uh = if j == n && self.terminal_offset == 0.0 {
                    0.0
                } else {
                    1.0 - kernel[j] / remaining[j]
                };
                (uh * uh - 0.5) * u[j]
            })
            .collect();
        let var_scale = noise.sigma * noise.sigma / (2.0 * rho);
        let mut w0 = vec![f64::NAN; n + 1];
        let mut a = vec![f64::NAN; n + 1];
        let mut p = vec![f64::NAN; n + 1];
        let mut q = vec![f64::NAN; n + 1];
        let mut buf_p = Vec::with_capacity(n + 1);
        let mut buf_q = Vec::with_capacity(n + 1);
        let last = if self.terminal_offset > 0.0 { n } else { n - 1 };
        for k in 0..=last {
            let r = remaining[k];
            let scale = -1.0 / (r * r);
            buf_p.clear();
            buf_q.clear();
            for (j, &wj) in weight.iter().enumerate().take(n + 1).skip(k) {
                let lag = grid.node(j) - grid.node(k);
                buf_p.push((-2.0 * rho * lag).exp() * wj);
                buf_q.push(var_scale * (-(-2.0 * rho * lag).exp_m1()) * wj);
            }
            w0[k] = 1.0 / r;
            a[k] = scale * kernel[k];
            p[k] = scale * simpson(&buf_p, dt);
            q[k] = scale * simpson(&buf_q, dt);
        }
        Ok(ExpansionTable {
            grid: *grid,
            epsilon: self.epsilon,
            w0,
            kind: TableKind::Polynomial { a, p, q },
            clamped: AtomicUsize::new(0),
        })
    }

    /// Coefficients tabulated on a `(t_k, z_j)` lattice with the generic route;
    /// evaluation interpolates linearly in `z` and clamps outside the range.
    pub fn generic_table(
        &self,
        moments: &dyn NoiseMoments,
        grid: &TimeGrid,
        z_nodes: &[f64],
    ) -> Result<ExpansionTable> {
        self.check_grid(grid)?;
        if z_nodes.len() < 2 || z_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(VolexError::InvalidParameter(
                "z lattice needs at least two increasing nodes".into(),
            ));
        }
        let n = grid.n_steps();
        let nz = z_nodes.len();
        let mut w0 = vec![f64::NAN; n + 1];
        let mut i1 = vec![f64::NAN; (n + 1) * nz];
        let mut i2 = vec![f64::NAN; (n + 1) * nz];
        let last = if self.terminal_offset > 0.0 { n } else { n - 1 };
        for k in 0..=last {
            let t = grid.node(k);
            w0[k] = self.base_w0(t)?;
            let inner = self.affine_inner(moments, t)?;
            for (j, &z) in z_nodes.iter().enumerate() {
                i1[k * nz + j] = self.i1_generic(moments, t, z)?;
                i2[k * nz + j] = self.i2_generic_with(moments, &inner, t, z)?;
            }
        }
        Ok(ExpansionTable {
            grid: *grid,
            epsilon: self.epsilon,
            w0,
            kind: TableKind::Lattice {
                z: z_nodes.to_vec(),
                i1,
                i2,
            },
            clamped: AtomicUsize::new(0),
        })
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(VolexError::Structural(format!(
                "grid horizon {} differs from expansion horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        Ok(())
    }
}

struct AffineInner {
    nodes: Vec<f64>,
    h: f64,
    u: Vec<f64>,
    phi_ratio: Vec<f64>,
    psi_ratio: Vec<f64>,
}

/// `z` lattice spanning `+-width` stationary standard deviations of OU noise.
pub fn stationary_z_nodes(noise: &OuNoise, width: f64, n: usize) -> Vec<f64> {
    let half = width * noise.stationary_sd();
    let n = n.max(2);
    (0..n).map(|j| -half + 2.0 * half * j as f64 / (n - 1) as f64).collect()
}

#[derive(Debug)]
enum TableKind {
    /// `I1 = a z`, `I2 = p z^2 + q`.
    Polynomial {
        a: Vec<f64>,
        p: Vec<f64>,
        q: Vec<f64>,
    },
    Lattice {
        z: Vec<f64>,
        i1: Vec<f64>,
        i2: Vec<f64>,
    },
}

/// Expansion coefficients precomputed on a simulation grid.
#[derive(Debug)]
pub struct ExpansionTable {
    grid: TimeGrid,
    epsilon: f64,
    w0: Vec<f64>,
    kind: TableKind,
    clamped: AtomicUsize,
}

impl ExpansionTable {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Same coefficients, different noise size (the `I` terms do not depend on it).
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let kind = match &self.kind {
            TableKind::Polynomial { a, p, q } => TableKind::Polynomial {
                a: a.clone(),
                p: p.clone(),
                q: q.clone(),
            },
            TableKind::Lattice { z, i1, i2 } => TableKind::Lattice {
                z: z.clone(),
                i1: i1.clone(),
                i2: i2.clone(),
            },
        };
        Self {
            grid: self.grid,
            epsilon,
            w0: self.w0.clone(),
            kind,
            clamped: AtomicUsize::new(0),
        }
    }

    pub fn base(&self, k: usize) -> f64 {
        self.w0[k]
    }

    /// `(I1, I2)` at node `k` and noise level `z`.
    pub fn coefficients(&self, k: usize, z: f64) -> (f64, f64) {
        match &self.kind {
            TableKind::Polynomial { a, p, q } => (a[k] * z, p[k] * z * z + q[k]),
            TableKind::Lattice { z: nodes, i1, i2 } => {
                let nz = nodes.len();
                let (lo, hi) = (nodes[0], nodes[nz - 1]);
                let zc = if z < lo || z > hi {
                    if self.clamped.fetch_add(1, Ordering::Relaxed) == 0 {
                        log::warn!("expansion lattice: z = {z} outside [{lo}, {hi}], clamping");
                    }
                    z.clamp(lo, hi)
                } else {
                    z
                };
                let pos = (zc - lo) / (hi - lo) * (nz - 1) as f64;
                let j = (pos.floor() as usize).min(nz - 2);
                let w = pos - j as f64;
                let row = k * nz;
                let lerp = |v: &[f64]| (1.0 - w) * v[row + j] + w * v[row + j + 1];
                (lerp(i1), lerp(i2))
            }
        }
    }

    /// `W0 + eps I1 + eps^2 I2` at node `k`.
    pub fn w(&self, k: usize, z: f64) -> f64 {
        let w0 = self.w0[k];
        if self.epsilon == 0.0 {
            return w0;
        }
        let (i1, i2) = self.coefficients(k, z);
        w0 + self.epsilon * i1 + self.epsilon * self.epsilon * i2
    }

    /// How many evaluations fell outside the lattice and were clamped.
    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Writes `t,z,I1,I2` rows for every finite node and the given `z` values.
    pub fn write_csv<W: Write>(&self, out: W, z_values: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "z", "I1", "I2"])?;
        for (k, t) in self.grid.nodes().enumerate() {
            if !self.w0[k].is_finite() {
                continue;
            }
            for &z in z_values {
                let (i1, i2) = self.coefficients(k, z);
                w.serialize((t, z, i1, i2))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, z_values: &[f64]) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, z_values)
    }
}
