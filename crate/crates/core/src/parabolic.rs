//! One-dimensional Crank–Nicolson solvers on `[-L, L]` with homogeneous
//! Neumann ends: the backward resolvent problem behind the Zvonkin
//! transform, the terminal-value problem of the Itô–Tanaka trick and the
//! forward mean equation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftSpec;
use crate::error::{invalid, LabError, Result};
use crate::field::{BoundaryCondition, GridMeta, SpaceTimeField};
use crate::flow::{integrate_sde, Trajectory};
use crate::noise::BrownianPath;
use crate::stats::loglog_slope;

/// Backward-Euler steps taken before switching to Crank–Nicolson, to damp
/// the high-frequency content of rough data.
const RANNACHER_STEPS: usize = 2;

/// Absolute contamination allowed from the zero terminal guess of the
/// resolvent march.
pub const PAD_TOL: f64 = 1e-8;

/// Space-time grid for the 1-D solvers: `n_x + 1` nodes on `[-L, L]` and
/// `n_t` steps on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicGrid {
    pub half_width: f64,
    pub n_x: usize,
    pub t_end: f64,
    pub n_t: usize,
}

impl ParabolicGrid {
    pub fn new(half_width: f64, n_x: usize, t_end: f64, n_t: usize) -> Result<Self> {
        let g = Self {
            half_width,
            n_x,
            t_end,
            n_t,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) || self.n_x < 4 {
            return Err(invalid("grid", "need L > 0 and n_x >= 4"));
        }
        if !(self.t_end > 0.0) || self.n_t == 0 {
            return Err(invalid("grid", "need T > 0 and n_t >= 1"));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.n_x as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_t as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h()
    }

    fn nodes(&self) -> Vec<f64> {
        (0..=self.n_x).map(|i| self.x(i)).collect()
    }

    fn meta(&self) -> GridMeta {
        GridMeta {
            x_lo: -self.half_width,
            x_hi: self.half_width,
            n_x: self.n_x,
            t_a: 0.0,
            t_b: self.t_end,
            n_t: self.n_t,
            boundary: BoundaryCondition::Neumann,
        }
    }
}

/// Right-hand side `f(t, x)`.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    Constant(f64),
    /// Time-independent `f(x)`.
    Stationary(&'a (dyn Fn(f64) -> f64 + Sync)),
    General(&'a (dyn Fn(f64, f64) -> f64 + Sync)),
}

impl Source<'_> {
    pub fn value(&self, t: f64, x: f64) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Stationary(f) => f(x),
            Source::General(f) => f(t, x),
        }
    }

    fn is_stationary(&self) -> bool {
        !matches!(self, Source::General(_))
    }
}

/// Solve the tridiagonal system with sub-diagonal `lower` (entry 0 unused),
/// diagonal `diag` and super-diagonal `upper` (last entry unused).
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rhs.len()];
    let mut scratch = vec![0.0; rhs.len()];
    thomas(lower, diag, upper, rhs, &mut out, &mut scratch)?;
    Ok(out)
}

fn thomas(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
    out: &mut [f64],
    c: &mut [f64],
) -> Result<()> {
    let n = rhs.len();
    let tiny = 1e-300;
    if diag[0].abs() < tiny {
        return Err(LabError::SingularSystem { row: 0 });
    }
    c[0] = upper[0] / diag[0];
    out[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        if m.abs() < tiny || !m.is_finite() {
            return Err(LabError::SingularSystem { row: i });
        }
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        out[i] = (rhs[i] - lower[i] * out[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        out[i] -= c[i] * out[i + 1];
    }
    Ok(())
}

/// Discrete `A u = κ u'' + c u' - r u` with Neumann ghost nodes.
struct Operator {
    h: f64,
    kappa: f64,
    reaction: f64,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    scratch: Vec<f64>,
}

impl Operator {
    fn new(n: usize, h: f64, kappa: f64, reaction: f64) -> Self {
        Self {
            h,
            kappa,
            reaction,
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    }

    fn apply(&self, c: &[f64], u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let (k, h) = (self.kappa / (self.h * self.h), self.h);
        out[0] = 2.0 * k * (u[1] - u[0]) - self.reaction * u[0];
        out[n - 1] = 2.0 * k * (u[n - 2] - u[n - 1]) - self.reaction * u[n - 1];
        for i in 1..n - 1 {
            out[i] = k * (u[i + 1] - 2.0 * u[i] + u[i - 1])
                + c[i] * (u[i + 1] - u[i - 1]) / (2.0 * h)
                - self.reaction * u[i];
        }
    }

    /// `(I - alpha A) out = rhs`.
    fn solve(&mut self, c: &[f64], alpha: f64, rhs: &[f64], out: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let k = self.kappa / (self.h * self.h);
        let d = 1.0 + alpha * (2.0 * k + self.reaction);
        for i in 0..n {
            self.diag[i] = d;
            let adv = c[i] / (2.0 * self.h);
            self.lower[i] = -alpha * (k - adv);
            self.upper[i] = -alpha * (k + adv);
        }
        self.upper[0] = -alpha * 2.0 * k;
        self.lower[n - 1] = -alpha * 2.0 * k;
        thomas(
            &self.lower,
            &self.diag,
            &self.upper,
            rhs,
            out,
            &mut self.scratch,
        )
    }
}

/// Time march of `∂_τ u = A(τ) u + g(τ)`. `coeffs(j, c, g)` fills the
/// advection coefficient and source at level `j`; `observe(j, u)` sees every
/// level including 0.
fn march(
    op: &mut Operator,
    n_steps: usize,
    dt: f64,
    u: &mut Vec<f64>,
    mut coeffs: impl FnMut(usize, &mut [f64], &mut [f64]) -> Result<bool>,
    mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    let n = u.len();
    let mut c_old = vec![0.0; n];
    let mut g_old = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut au = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut next = vec![0.0; n];
    coeffs(0, &mut c_old, &mut g_old)?;
    observe(0, u)?;
    for j in 1..=n_steps {
        // coefficients are recomputed only when they change in time
        if coeffs(j, &mut c_new, &mut g_new)? {
            // unchanged: keep c_new/g_new equal to the old level
            c_new.copy_from_slice(&c_old);
            g_new.copy_from_slice(&g_old);
        }
        let theta = if j <= RANNACHER_STEPS { 1.0 } else { 0.5 };
        if theta < 1.0 {
            op.apply(&c_old, u, &mut au);
        } else {
            au.iter_mut().for_each(|v| *v = 0.0);
        }
        for i in 0..n {
            rhs[i] = u[i]
                + (1.0 - theta) * dt * au[i]
                + dt * (theta * g_new[i] + (1.0 - theta) * g_old[i]);
        }
        op.solve(&c_new, theta * dt, &rhs, &mut next)?;
        std::mem::swap(u, &mut next);
        std::mem::swap(&mut c_old, &mut c_new);
        std::mem::swap(&mut g_old, &mut g_new);
        observe(j, u)?;
    }
    Ok(())
}

/// Fills node arrays of `b(t, ·)` and `sign * f(t, ·)`; returns `Ok(true)` if
/// both are time-independent and were already filled.
struct NodeCoefficients<'a> {
    drift: &'a DriftSpec,
    source: Source<'a>,
    source_sign: f64,
    nodes: Vec<f64>,
    frozen: bool,
    filled: bool,
    f_sup: f64,
}

impl<'a> NodeCoefficients<'a> {
    fn new(drift: &'a DriftSpec, source: Source<'a>, source_sign: f64, nodes: Vec<f64>) -> Self {
        let frozen = drift.is_time_independent() && source.is_stationary();
        Self {
            drift,
            source,
            source_sign,
            nodes,
            frozen,
            filled: false,
            f_sup: 0.0,
        }
    }

    fn fill(&mut self, t: f64, c: &mut [f64], g: &mut [f64]) -> Result<bool> {
        if self.frozen && self.filled {
            return Ok(true);
        }
        let vals: Vec<(f64, f64)> = self
            .nodes
            .par_iter()
            .map(|&x| Ok((self.drift.eval_1d(t, x)?, self.source.value(t, x))))
            .collect::<Result<_>>()?;
        for (i, (b, f)) in vals.into_iter().enumerate() {
            c[i] = b;
            g[i] = self.source_sign * f;
            self.f_sup = self.f_sup.max(f.abs());
        }
        self.filled = true;
        Ok(false)
    }
}

fn check_1d(drift: &DriftSpec) -> Result<()> {
    if drift.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: drift.dim(),
        });
    }
    Ok(())
}

/// Smallest pad with `e^{-λ pad} ‖f‖₀ / λ ≤ PAD_TOL`.
pub fn required_pad(f_sup: f64, lambda: f64) -> f64 {
    ((f_sup / (lambda * PAD_TOL)).max(1.0)).ln() / lambda
}

/// `∂_t u + ½ u'' + b u' - λ u = f` on `[0, T]`, obtained by marching back
/// from `T + pad` with terminal guess 0 and `b`, `f` frozen at time `T`
/// beyond `T`.
pub fn solve_backward_resolvent(
    drift: &DriftSpec,
    f: Source<'_>,
    lambda: f64,
    grid: &ParabolicGrid,
    horizon_pad: f64,
) -> Result<SpaceTimeField> {
    check_1d(drift)?;
    grid.validate()?;
    if !(lambda > 0.0) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if !(horizon_pad >= 0.0) {
        return Err(invalid("horizon_pad", "must be non-negative"));
    }
    let dt = grid.dt();
    let pad_steps = (horizon_pad / dt).ceil() as usize;
    let total = grid.n_t + pad_steps;
    let t_top = total as f64 * dt;
    let n = grid.n_x + 1;
    let mut coef = NodeCoefficients::new(drift, f, -1.0, grid.nodes());
    let mut op = Operator::new(n, grid.h(), 0.5, lambda);
    let mut u = vec![0.0; n];
    let mut values = vec![0.0; n * (grid.n_t + 1)];
    march(
        &mut op,
        total,
        dt,
        &mut u,
        |j, c, g| {
            let t = (t_top - j as f64 * dt).min(grid.t_end).max(0.0);
            coef.fill(t, c, g)
        },
        |j, u| {
            if j >= pad_steps {
                let k = total - j;
                values[k * n..(k + 1) * n].copy_from_slice(u);
            }
            Ok(())
        },
    )?;
    let mut field = SpaceTimeField::new(grid.meta(), values)?;
    let f_sup = coef.f_sup;
    let mut warnings = Vec::new();
    let need = required_pad(f_sup, lambda);
    if horizon_pad < need {
        warnings.push(format!(
            "horizon_pad {horizon_pad} < {need:.4}: terminal guess may contaminate t = T by up to {:.3e}",
            (-lambda * horizon_pad).exp() * f_sup / lambda
        ));
    }
    if field.sup_abs() > 1.1 * f_sup / lambda + PAD_TOL {
        warnings.push(format!(
            "sup|u| = {:.6e} exceeds 1.1 ‖f‖₀/λ = {:.6e}",
            field.sup_abs(),
            1.1 * f_sup / lambda
        ));
    }
    if !warnings.is_empty() {
        field.warning = Some(warnings.join("; "));
    }
    Ok(field)
}

/// Piecewise-linear interpolation of node values `u` at `x`.
fn interp(u: &[f64], lo: f64, h: f64, x: f64) -> f64 {
    let n = u.len() - 1;
    let pos = ((x - lo) / h).clamp(0.0, n as f64);
    let i = (pos.floor() as usize).min(n - 1);
    let fr = pos - i as f64;
    u[i] + fr * (u[i + 1] - u[i])
}

/// Interpolated centered-difference derivative of node values `u` at `x`.
fn interp_dx(u: &[f64], lo: f64, h: f64, x: f64) -> f64 {
    let n = u.len() - 1;
    let d = |j: usize| -> f64 {
        if j == 0 || j == n {
            0.0
        } else {
            (u[j + 1] - u[j - 1]) / (2.0 * h)
        }
    };
    let pos = ((x - lo) / h).clamp(0.0, n as f64);
    let i = (pos.floor() as usize).min(n - 1);
    let fr = pos - i as f64;
    d(i) + fr * (d(i + 1) - d(i))
}

/// Largest centered-difference `|Dψ|` over all slices of a field.
pub fn grad_sup(field: &SpaceTimeField) -> f64 {
    let h = field.hx();
    let n = field.meta.n_x;
    let mut best = 0.0f64;
    for k in 0..=field.meta.n_t {
        let s = field.slice(k);
        for i in 1..n {
            best = best.max(((s[i + 1] - s[i - 1]) / (2.0 * h)).abs());
        }
    }
    best
}

/// `Ψ(t, x) = x + ψ(t, x)` built from the resolvent with `f = -b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZvonkinTransform {
    pub psi: SpaceTimeField,
    pub lambda: f64,
    pub grad_sup: f64,
}

pub fn build_zvonkin_transform(
    drift: &DriftSpec,
    lambda: f64,
    grid: &ParabolicGrid,
    horizon_pad: f64,
) -> Result<ZvonkinTransform> {
    check_1d(drift)?;
    let minus_b = |t: f64, x: f64| -drift.eval_1d(t, x).unwrap_or(f64::NAN);
    let psi =
        solve_backward_resolvent(drift, Source::General(&minus_b), lambda, grid, horizon_pad)?;
    let g = grad_sup(&psi);
    if g >= 1.0 {
        // sup|Dψ| scales like λ^{-1/2}; aim for 1/2
        let suggested = lambda * (2.0 * g).powi(2);
        return Err(LabError::TransformNotInvertible {
            grad_sup: g,
            lambda,
            suggested,
        });
    }
    Ok(ZvonkinTransform {
        psi,
        lambda,
        grad_sup: g,
    })
}

impl ZvonkinTransform {
    pub fn psi_at(&self, t: f64, x: f64) -> Result<f64> {
        self.psi.interpolate(t, x)
    }

    /// `Ψ(t, x)`.
    pub fn forward(&self, t: f64, x: f64) -> Result<f64> {
        Ok(x + self.psi.interpolate(t, x)?)
    }

    /// `Ψ^{-1}(t, y)` by bisection on the increasing interpolant.
    pub fn inverse(&self, t: f64, y: f64) -> Result<f64> {
        let m = &self.psi.meta;
        let (lo_img, hi_img) = (self.forward(t, m.x_lo)?, self.forward(t, m.x_hi)?);
        if !(y >= lo_img && y <= hi_img) {
            return Err(LabError::OutOfImage {
                y,
                lo: lo_img,
                hi: hi_img,
            });
        }
        let (mut a, mut b) = (m.x_lo, m.x_hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if self.forward(t, mid)? < y {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// `b̃(t, y) = λ ψ(t, Ψ^{-1}(t, y))`.
    pub fn conjugated_drift(&self, t: f64, y: f64) -> Result<f64> {
        let x = self.inverse(t, y)?;
        Ok(self.lambda * self.psi.interpolate(t, x)?)
    }

    /// `σ̃(t, y) = DΨ(t, Ψ^{-1}(t, y))`.
    pub fn conjugated_diffusion(&self, t: f64, y: f64) -> Result<f64> {
        let x = self.inverse(t, y)?;
        Ok(1.0 + self.psi.interpolate_dx(t, x)?)
    }

    /// Smallest forward difference quotient of `Ψ(t, ·)` over all slices.
    pub fn min_slope(&self) -> f64 {
        let h = self.psi.hx();
        let mut best = f64::INFINITY;
        for k in 0..=self.psi.meta.n_t {
            let s = self.psi.slice(k);
            for w in s.windows(2) {
                best = best.min(1.0 + (w[1] - w[0]) / h);
            }
        }
        best
    }

    /// Euler–Maruyama for `dY = b̃ dt + σ̃ dW` from `Y_s = Ψ(s, x0)`, mapped
    /// back through `Ψ^{-1}`.
    pub fn solve_conjugated(
        &self,
        path: &BrownianPath,
        x0: f64,
        s: f64,
        t: f64,
    ) -> Result<Trajectory> {
        let ks = path
            .grid_index(s)
            .ok_or_else(|| invalid("s", "not on the path grid"))?;
        let kt = path
            .grid_index(t)
            .ok_or_else(|| invalid("t", "not on the path grid"))?;
        let dt = path.dt();
        let mut y = self.forward(s, x0)?;
        let mut times = vec![path.time(ks)];
        let mut states = vec![x0];
        for k in ks..kt {
            let tk = path.time(k);
            let x = self.inverse(tk, y)?;
            let drift = self.lambda * self.psi.interpolate(tk, x)?;
            let sigma = 1.0 + self.psi.interpolate_dx(tk, x)?;
            y += drift * dt + sigma * path.increment(k)[0];
            times.push(path.time(k + 1));
            states.push(self.inverse(path.time(k + 1), y)?);
        }
        Ok(Trajectory {
            s,
            dim: 1,
            times,
            states,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDecayTable {
    /// `(λ, sup|Dψ_λ|)`.
    pub rows: Vec<(f64, f64)>,
    /// Least-squares slope of `log sup|Dψ|` against `log λ`; `None` when every
    /// entry is exactly zero.
    pub slope: Option<f64>,
    pub exact_zero: bool,
    pub monotone: bool,
}

/// `sup|Dψ_λ|` along a `λ` ladder, with `f = -b`; `pad_factor` sets the pad
/// to `pad_factor * required_pad`.
pub fn grad_decay_study(
    drift: &DriftSpec,
    lambdas: &[f64],
    grid: &ParabolicGrid,
    pad_factor: f64,
) -> Result<GradDecayTable> {
    check_1d(drift)?;
    if lambdas.len() < 2 || lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(
            "lambda_list",
            "need an increasing list of at least two values",
        ));
    }
    let b_sup = grid
        .nodes()
        .iter()
        .map(|&x| drift.eval_1d(0.0, x).map(f64::abs))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    let minus_b = |t: f64, x: f64| -drift.eval_1d(t, x).unwrap_or(f64::NAN);
    let rows: Vec<(f64, f64)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let pad = pad_factor * required_pad(b_sup.max(1e-300), lambda);
            let psi =
                solve_backward_resolvent(drift, Source::General(&minus_b), lambda, grid, pad)?;
            Ok((lambda, grad_sup(&psi)))
        })
        .collect::<Result<_>>()?;
    let exact_zero = rows.iter().all(|r| r.1 == 0.0);
    let slope = if exact_zero {
        None
    } else {
        let (ls, gs): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        loglog_slope(&ls, &gs)
    };
    let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(GradDecayTable {
        rows,
        slope,
        exact_zero,
        monotone,
    })
}

/// Streams the solution of `∂_t F + ½ F'' + b F' = f`, `F(T) = 0`, slice by
/// slice from `t = T` down to `t = 0`: `observe(k, u)` receives `F(t_k, ·)`.
pub fn solve_terminal_value_streaming(
    drift: &DriftSpec,
    f: Source<'_>,
    grid: &ParabolicGrid,
    mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    check_1d(drift)?;
    grid.validate()?;
    let dt = grid.dt();
    let n = grid.n_x + 1;
    let mut coef = NodeCoefficients::new(drift, f, -1.0, grid.nodes());
    let mut op = Operator::new(n, grid.h(), 0.5, 0.0);
    let mut u = vec![0.0; n];
    march(
        &mut op,
        grid.n_t,
        dt,
        &mut u,
        |j, c, g| coef.fill(grid.t_end - j as f64 * dt, c, g),
        |j, u| observe(grid.n_t - j, u),
    )
}

/// `∂_t F + ½ F'' + b F' = f` on `[0, T]` with `F(T, ·) = 0`.
pub fn solve_terminal_value(
    drift: &DriftSpec,
    f: Source<'_>,
    grid: &ParabolicGrid,
) -> Result<SpaceTimeField> {
    let n = grid.n_x + 1;
    let mut values = vec![0.0; n * (grid.n_t + 1)];
    solve_terminal_value_streaming(drift, f, grid, |k, u| {
        values[k * n..(k + 1) * n].copy_from_slice(u);
        Ok(())
    })?;
    SpaceTimeField::new(grid.meta(), values)
}

/// Sign in front of `½ ū''` in the mean equation `∂_t ū + b ū' = ±½ ū''`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSign {
    /// `+½`: well-posed forward heat flow.
    Forward,
    /// `-½`: backward heat flow, ill-posed forward in time.
    Backward,
}

/// `∂_t ū + b ū' = ½ ū''`, `ū(0) = u0`.
pub fn solve_mean_pde(
    drift: &DriftSpec,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    grid: &ParabolicGrid,
) -> Result<SpaceTimeField> {
    solve_mean_pde_signed(drift, u0, grid, DiffusionSign::Forward)
}

/// Mean equation with a selectable diffusion sign; every step is checked
/// against the maximum principle `min u0 ≤ ū ≤ max u0` (tolerance 1e-8).
pub fn solve_mean_pde_signed(
    drift: &DriftSpec,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    grid: &ParabolicGrid,
    sign: DiffusionSign,
) -> Result<SpaceTimeField> {
    check_1d(drift)?;
    grid.validate()?;
    let n = grid.n_x + 1;
    let dt = grid.dt();
    let nodes = grid.nodes();
    let mut u: Vec<f64> = nodes.iter().map(|&x| u0(x)).collect();
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min) - 1e-8;
    let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-8;
    let kappa = match sign {
        DiffusionSign::Forward => 0.5,
        DiffusionSign::Backward => -0.5,
    };
    let mut op = Operator::new(n, grid.h(), kappa, 0.0);
    let zero = Source::Constant(0.0);
    let mut coef = NodeCoefficients::new(drift, zero, 0.0, nodes);
    let mut values = vec![0.0; n * (grid.n_t + 1)];
    march(
        &mut op,
        grid.n_t,
        dt,
        &mut u,
        |j, c, g| {
            let r = coef.fill(j as f64 * dt, c, g)?;
            // transport enters as -b u'
            if !r {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            Ok(r)
        },
        |j, u| {
            let t = j as f64 * dt;
            for &v in u {
                if !v.is_finite() {
                    return Err(LabError::NonFiniteState { step: j, t });
                }
                if v < lo || v > hi {
                    return Err(LabError::MaximumPrinciple {
                        t,
                        value: v,
                        lo: lo + 1e-8,
                        hi: hi - 1e-8,
                    });
                }
            }
            values[j * n..(j + 1) * n].copy_from_slice(u);
            Ok(())
        },
    )?;
    SpaceTimeField::new(grid.meta(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoTanakaResult {
    /// `∫_0^T f(s, X_s) ds` by the trapezoid rule.
    pub lhs: f64,
    /// `F(T, X_T)`.
    pub terminal: f64,
    /// `F(0, x)`.
    pub initial: f64,
    /// Left-point sum `Σ DF(t_k, X_k) ΔW_k`.
    pub stochastic_integral: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Checks `∫ f(s, X_s) ds = F(T, X_T) - F(0, x) - ∫ DF(s, X_s) dW_s` on one path.
pub fn ito_tanaka_check(
    drift: &DriftSpec,
    f: Source<'_>,
    path: &BrownianPath,
    x0: f64,
    grid: &ParabolicGrid,
) -> Result<ItoTanakaResult> {
    Ok(ito_tanaka_batch(drift, f, std::slice::from_ref(path), x0, grid)?[0])
}

/// [`ito_tanaka_check`] over several paths sharing one PDE solve, which is
/// streamed so the space-time field is never stored.
pub fn ito_tanaka_batch(
    drift: &DriftSpec,
    f: Source<'_>,
    paths: &[BrownianPath],
    x0: f64,
    grid: &ParabolicGrid,
) -> Result<Vec<ItoTanakaResult>> {
    check_1d(drift)?;
    grid.validate()?;
    for p in paths {
        if p.n_steps() != grid.n_t || (p.t_end() - grid.t_end).abs() > 1e-12 * grid.t_end {
            return Err(invalid(
                "grid",
                "time grid must coincide with the path grid",
            ));
        }
    }
    let l = grid.half_width;
    let trajectories: Vec<Trajectory> = paths
        .par_iter()
        .map(|p| {
            let tr = integrate_sde(drift, p, &[x0], 0.0, grid.t_end)?;
            if let Some(k) = tr.states.iter().position(|x| x.abs() > l) {
                return Err(LabError::DomainExit {
                    t: tr.times[k],
                    half_width: l,
                });
            }
            Ok(tr)
        })
        .collect::<Result<_>>()?;
    let dt = grid.dt();
    let mut results: Vec<ItoTanakaResult> = trajectories
        .iter()
        .map(|tr| {
            let vals: Vec<f64> = tr
                .times
                .iter()
                .zip(&tr.states)
                .map(|(t, x)| f.value(*t, *x))
                .collect();
            let lhs = dt * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[vals.len() - 1]));
            ItoTanakaResult {
                lhs,
                terminal: 0.0,
                initial: 0.0,
                stochastic_integral: 0.0,
                rhs: 0.0,
                residual: 0.0,
            }
        })
        .collect();
    let lo = -l;
    let h = grid.h();
    solve_terminal_value_streaming(drift, f, grid, |k, u| {
        for ((res, tr), p) in results.iter_mut().zip(&trajectories).zip(paths) {
            let x = tr.states[k];
            if k == grid.n_t {
                res.terminal = interp(u, lo, h, x);
            } else {
                res.stochastic_integral += interp_dx(u, lo, h, x) * p.increment(k)[0];
            }
            if k == 0 {
                res.initial = interp(u, lo, h, x);
            }
        }
        Ok(())
    })?;
    for r in results.iter_mut() {
        r.rhs = r.terminal - r.initial - r.stochastic_integral;
        r.residual = (r.lhs - r.rhs).abs();
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::mollify_drift;
    use crate::noise::sample_brownian;
    use std::f64::consts::PI;

    fn grid(l: f64, n_x: usize, t: f64, n_t: usize) -> ParabolicGrid {
        ParabolicGrid::new(l, n_x, t, n_t).unwrap()
    }

    #[test]
    fn thomas_matches_dense_solution() {
        let lower = [0.0, 1.0, -2.0, 0.5];
        let diag = [4.0, 5.0, 6.0, 3.0];
        let upper = [1.0, 2.0, 1.0, 0.0];
        let x = [1.0, -2.0, 0.5, 3.0];
        let rhs: Vec<f64> = (0..4)
            .map(|i| {
                diag[i] * x[i]
                    + if i > 0 { lower[i] * x[i - 1] } else { 0.0 }
                    + if i < 3 { upper[i] * x[i + 1] } else { 0.0 }
            })
            .collect();
        let got = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        for i in 0..4 {
            assert!((got[i] - x[i]).abs() < 1e-14);
        }
        assert!(matches!(
            solve_tridiagonal(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]),
            Err(LabError::SingularSystem { row: 0 })
        ));
    }

    #[test]
    fn resolvent_constant_and_zero_sources() {
        let g = grid(4.0, 64, 1.0, 32);
        let u = solve_backward_resolvent(&DriftSpec::zero(1), Source::Constant(1.0), 4.0, &g, 6.0)
            .unwrap();
        assert!(u.warning.is_none(), "{:?}", u.warning);
        for v in u.values() {
            assert!((v + 0.25).abs() < 1e-8, "{v}");
        }
        let z = solve_backward_resolvent(
            &DriftSpec::holder(0.5, 2.0),
            Source::Constant(0.0),
            4.0,
            &g,
            1.0,
        )
        .unwrap();
        assert_eq!(z.sup_abs(), 0.0);
        let short =
            solve_backward_resolvent(&DriftSpec::zero(1), Source::Constant(1.0), 4.0, &g, 0.5)
                .unwrap();
        assert!(short.warning.is_some());
    }

    #[test]
    fn resolvent_sine_converges_at_second_order() {
        // sin(kx) with k = π/L meets the Neumann condition at ±1.5 L
        let l = 4.0;
        let k = PI / l;
        let lambda = 4.0;
        let f = move |x: f64| (k * x).sin();
        let mut errs = Vec::new();
        for n_x in [32usize, 64, 128] {
            let g = grid(1.5 * l, n_x, 1.0, 64);
            let u = solve_backward_resolvent(
                &DriftSpec::zero(1),
                Source::Stationary(&f),
                lambda,
                &g,
                6.0,
            )
            .unwrap();
            let mut err = 0.0f64;
            for i in 0..=n_x {
                let x = g.x(i);
                let exact = -(k * x).sin() / (lambda + k * k / 2.0);
                err = err.max((u.slice(0)[i] - exact).abs());
            }
            errs.push(err);
        }
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((3.0..=5.0).contains(&r), "{r} {errs:?}");
        }
    }

    #[test]
    fn terminal_value_closed_forms() {
        let g = grid(4.0, 128, 1.0, 128);
        let c =
            solve_terminal_value(&DriftSpec::holder(0.5, 2.0), Source::Constant(2.0), &g).unwrap();
        for k in 0..=g.n_t {
            let t = k as f64 * g.dt();
            for v in c.slice(k) {
                assert!((v + 2.0 * (1.0 - t)).abs() < 1e-12);
            }
        }
        assert!(c.slice(g.n_t).iter().all(|v| *v == 0.0));
        let kk = PI / 4.0;
        let f = move |x: f64| (kk * x).sin();
        let g = grid(6.0, 192, 1.0, 128);
        let s = solve_terminal_value(&DriftSpec::zero(1), Source::Stationary(&f), &g).unwrap();
        let exact = |t: f64, x: f64| {
            (kk * x).sin() * ((-kk * kk * (1.0 - t) / 2.0).exp() - 1.0) / (kk * kk / 2.0)
        };
        for i in (0..=192).step_by(8) {
            assert!((s.slice(0)[i] - exact(0.0, g.x(i))).abs() < 1e-3);
        }
    }

    #[test]
    fn mean_pde_heat_kernel() {
        let s2 = 0.1;
        let u0 = move |x: f64| (-x * x / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
        let g = grid(6.0, 600, 1.0, 2000);
        let u = solve_mean_pde(&DriftSpec::zero(1), &u0, &g).unwrap();
        let var = s2 + 1.0;
        for i in (200..=400).step_by(20) {
            let x = g.x(i);
            let exact = (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            assert!((u.slice(g.n_t)[i] - exact).abs() < 1e-4);
        }
    }

    #[test]
    fn mean_pde_constants_and_backward_sign() {
        let g = grid(3.0, 120, 0.5, 200);
        let one = |_: f64| 1.0;
        let u = solve_mean_pde(&DriftSpec::holder(0.5, 2.0), &one, &g).unwrap();
        assert!(u.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let bump = |x: f64| (-x * x * 4.0).exp();
        let bad = solve_mean_pde_signed(&DriftSpec::zero(1), &bump, &g, DiffusionSign::Backward);
        assert!(matches!(
            bad,
            Err(LabError::MaximumPrinciple { .. })
                | Err(LabError::NonFiniteState { .. })
                | Err(LabError::SingularSystem { .. })
        ));
    }

    #[test]
    fn zvonkin_zero_drift_is_identity() {
        let g = grid(4.0, 64, 1.0, 16);
        let z = build_zvonkin_transform(&DriftSpec::zero(1), 10.0, &g, 1.0).unwrap();
        assert_eq!(z.grad_sup, 0.0);
        assert_eq!(z.forward(0.5, 0.3).unwrap(), 0.3);
        assert_eq!(z.conjugated_drift(0.5, 0.3).unwrap(), 0.0);
        assert_eq!(z.conjugated_diffusion(0.5, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn zvonkin_inverse_round_trips() {
        let b = mollify_drift(&DriftSpec::holder(0.5, 2.0), 0.05, 16).unwrap();
        let g = grid(6.0, 768, 1.0, 32);
        let z = build_zvonkin_transform(&b, 50.0, &g, 0.5).unwrap();
        assert!(z.grad_sup < 1.0);
        assert!(z.min_slope() > 0.0);
        for y in [-3.0, -0.4, 0.0, 0.1, 2.5] {
            let x = z.inverse(0.3, y).unwrap();
            assert!((z.forward(0.3, x).unwrap() - y).abs() < 2.0 * g.h());
        }
    }

    #[test]
    fn zvonkin_refuses_small_lambda() {
        let b = DriftSpec::holder(0.5, 2.0);
        let g = grid(6.0, 384, 1.0, 16);
        match build_zvonkin_transform(&b, 0.05, &g, 40.0) {
            Err(LabError::TransformNotInvertible {
                suggested, lambda, ..
            }) => assert!(suggested > lambda),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grad_decay_zero_drift() {
        let g = grid(4.0, 64, 1.0, 8);
        let t =
            grad_decay_study(&DriftSpec::zero(1), &[10.0, 30.0, 100.0, 300.0], &g, 1.0).unwrap();
        assert!(t.exact_zero && t.slope.is_none() && t.monotone);
    }

    #[test]
    fn ito_tanaka_constant_integrand() {
        let path = sample_brownian(8, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        let g = grid(8.0, 256, 1.0, 256);
        let r = ito_tanaka_check(
            &DriftSpec::holder(0.5, 2.0),
            Source::Constant(3.0),
            &path,
            0.0,
            &g,
        )
        .unwrap();
        assert!((r.lhs - 3.0).abs() < 1e-12);
        assert!(r.residual < 1e-10, "{r:?}");
        let z =
            ito_tanaka_check(&DriftSpec::zero(1), Source::Constant(0.0), &path, 0.0, &g).unwrap();
        assert_eq!(z.lhs, 0.0);
        assert_eq!(z.residual, 0.0);
    }

    #[test]
    fn ito_tanaka_domain_exit() {
        let path = sample_brownian(8, 0, 1, 1.0, 1.0 / 64.0).unwrap();
        let g = grid(0.05, 64, 1.0, 64);
        assert!(matches!(
            ito_tanaka_check(
                &DriftSpec::holder(0.5, 2.0),
                Source::Constant(1.0),
                &path,
                0.0,
                &g
            ),
            Err(LabError::DomainExit { .. })
        ));
    }
}
