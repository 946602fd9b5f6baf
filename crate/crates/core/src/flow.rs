//! Characteristics of `dX = b(t, X) dt + dW`: Euler–Maruyama trajectories,
//! forward and inverse flows on lattices, Jacobians and probes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{DivergenceMode, DriftSpec};
use crate::error::{invalid, LabError, Result};
use crate::noise::{fmt17, BrownianPath, PathSource, PathSpec, SmoothedPath};
use crate::stats::median;

/// Step used when a divergence has to fall back to finite differences.
pub const DIV_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub s: f64,
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn grid_index(path: &BrownianPath, t: f64, name: &'static str) -> Result<usize> {
    path.grid_index(t).ok_or_else(|| {
        if t < 0.0 || t > path.t_end() * (1.0 + 1e-12) {
            LabError::TimeOutOfRange {
                t,
                start: 0.0,
                end: path.t_end(),
            }
        } else {
            invalid(name, format!("{t} is not a multiple of dt = {}", path.dt()))
        }
    })
}

fn check_times(path: &BrownianPath, s: f64, t: f64) -> Result<(usize, usize)> {
    let ks = grid_index(path, s, "s")?;
    let kt = grid_index(path, t, "t")?;
    if ks > kt {
        return Err(invalid("s", format!("start {s} after end {t}")));
    }
    Ok((ks, kt))
}

fn check_dims(drift: &DriftSpec, path: &BrownianPath, x: &[f64]) -> Result<()> {
    let d = drift.dim();
    for got in [path.dim(), x.len()] {
        if got != d {
            return Err(LabError::DimensionMismatch { expected: d, got });
        }
    }
    Ok(())
}

/// Time stepping for the drift part. The noise is additive, so every scheme
/// adds the path increment `ΔW_k` after the drift update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `X_{k+1} = X_k + b(t_k, X_k) dt + ΔW_k`.
    #[default]
    EulerMaruyama,
    /// `X* = X_k + b(t_k + dt/2, (X_k + X*)/2) dt`, then `X_{k+1} = X* + ΔW_k`.
    /// The drift map is symplectic, so planar divergence-free drifts give
    /// area-preserving steps.
    ImplicitMidpoint,
}

const MIDPOINT_MAX_ITER: usize = 100;

fn midpoint_step(
    drift: &DriftSpec,
    t: f64,
    dt: f64,
    x: &mut [f64],
    mid: &mut [f64],
    b: &mut [f64],
) -> Result<()> {
    let d = x.len();
    let x0 = x.to_vec();
    drift.eval_into(t, &x0, b)?;
    let mut next: Vec<f64> = (0..d).map(|i| x0[i] + b[i] * dt).collect();
    for _ in 0..MIDPOINT_MAX_ITER {
        for i in 0..d {
            mid[i] = 0.5 * (x0[i] + next[i]);
        }
        drift.eval_into(t + 0.5 * dt, mid, b)?;
        let mut change = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..d {
            let v = x0[i] + b[i] * dt;
            change = change.max((v - next[i]).abs());
            scale = scale.max(v.abs());
            next[i] = v;
        }
        if change <= 4.0 * f64::EPSILON * scale.max(1.0) {
            break;
        }
    }
    x.copy_from_slice(&next);
    Ok(())
}

/// Time-stepping from grid index `k0` to `k1`, calling `observe(k, x)` at
/// every grid index including `k0`.
fn march(
    drift: &DriftSpec,
    path: &BrownianPath,
    scheme: Scheme,
    x: &mut [f64],
    k0: usize,
    k1: usize,
    mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    let dt = path.dt();
    let mut b = vec![0.0; x.len()];
    let mut mid = vec![0.0; x.len()];
    observe(k0, x)?;
    for k in k0..k1 {
        match scheme {
            Scheme::EulerMaruyama => {
                drift.eval_into(path.time(k), x, &mut b)?;
                for i in 0..x.len() {
                    x[i] += b[i] * dt;
                }
            }
            Scheme::ImplicitMidpoint => {
                midpoint_step(drift, path.time(k), dt, x, &mut mid, &mut b)?
            }
        }
        let dw = path.increment(k);
        for i in 0..x.len() {
            x[i] += dw[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFiniteState {
                step: k + 1,
                t: path.time(k + 1),
            });
        }
        observe(k + 1, x)?;
    }
    Ok(())
}

fn euler(
    drift: &DriftSpec,
    path: &BrownianPath,
    x: &mut [f64],
    k0: usize,
    k1: usize,
    observe: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    march(drift, path, Scheme::EulerMaruyama, x, k0, k1, observe)
}

/// `X_t^{s,x0}` on the path grid between `s` and `t`.
pub fn integrate_sde(
    drift: &DriftSpec,
    path: &BrownianPath,
    x0: &[f64],
    s: f64,
    t: f64,
) -> Result<Trajectory> {
    check_dims(drift, path, x0)?;
    let (ks, kt) = check_times(path, s, t)?;
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(kt - ks + 1);
    let mut states = Vec::with_capacity((kt - ks + 1) * x0.len());
    euler(drift, path, &mut x, ks, kt, |k, xs| {
        times.push(path.time(k));
        states.extend_from_slice(xs);
        Ok(())
    })?;
    Ok(Trajectory {
        s,
        dim: x0.len(),
        times,
        states,
    })
}

/// `X_t^{s,x0}` without storing the trajectory.
pub fn flow_endpoint(
    drift: &DriftSpec,
    path: &BrownianPath,
    x0: &[f64],
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(drift, path, x0)?;
    let (ks, kt) = check_times(path, s, t)?;
    let mut x = x0.to_vec();
    euler(drift, path, &mut x, ks, kt, |_, _| Ok(()))?;
    Ok(x)
}

/// Lattice of initial points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowGrid {
    /// `lo + i h`, `i = 0..n`.
    Line { lo: f64, h: f64, n: usize },
    /// `(lo[0] + i h, lo[1] + j h)`, point index `i + n[0] j`.
    Plane { lo: [f64; 2], h: f64, n: [usize; 2] },
}

impl FlowGrid {
    /// `n` points spanning `[lo, hi]`.
    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(invalid("grid", "need n >= 2 and hi > lo"));
        }
        Ok(FlowGrid::Line {
            lo,
            h: (hi - lo) / (n - 1) as f64,
            n,
        })
    }

    /// `n x n` points spanning `[lo, hi]^2`.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(invalid("grid", "need n >= 2 and hi > lo"));
        }
        Ok(FlowGrid::Plane {
            lo: [lo, lo],
            h: (hi - lo) / (n - 1) as f64,
            n: [n, n],
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowGrid::Line { .. } => 1,
            FlowGrid::Plane { .. } => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FlowGrid::Line { n, .. } => *n,
            FlowGrid::Plane { n, .. } => n[0] * n[1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        match self {
            FlowGrid::Line { h, .. } | FlowGrid::Plane { h, .. } => *h,
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        match self {
            FlowGrid::Line { lo, h, .. } => vec![lo + idx as f64 * h],
            FlowGrid::Plane { lo, h, n } => {
                let (i, j) = (idx % n[0], idx / n[0]);
                vec![lo[0] + i as f64 * h, lo[1] + j as f64 * h]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    /// Stores `φ_{s,t}(x)` for lattice points `x`.
    Forward,
    /// Stores `φ_{s,t}^{-1}(y)` for lattice points `y`.
    Backward,
}

/// Flow of every lattice point under one shared path, stored at `times`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEnsemble {
    pub grid: FlowGrid,
    pub s: f64,
    pub times: Vec<f64>,
    pub direction: FlowDirection,
    pub path: Option<PathSpec>,
    /// Row-major `times x points x dim`.
    states: Vec<f64>,
}

impl FlowEnsemble {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn state(&self, time_idx: usize, point: usize) -> &[f64] {
        let d = self.dim();
        let off = (time_idx * self.grid.len() + point) * d;
        &self.states[off..off + d]
    }

    /// Index of `t` in the stored times.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * s.abs().max(1.0))
            .ok_or_else(|| invalid("t", format!("{t} is not a stored time")))
    }

    /// Images of a 1-D lattice at stored time `time_idx`.
    pub fn images_1d(&self, time_idx: usize) -> Vec<f64> {
        (0..self.grid.len())
            .map(|p| self.state(time_idx, p)[0])
            .collect()
    }

    /// CSV with one row per stored time and one column per lattice point and
    /// coordinate.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let d = self.dim();
        let mut header = vec!["t".to_string()];
        for p in 0..self.grid.len() {
            let x = self.grid.point(p);
            if d == 1 {
                header.push(format!("x0={}", fmt17(x[0])));
            } else {
                for c in 0..d {
                    header.push(format!("x0=({} {})[{c}]", fmt17(x[0]), fmt17(x[1])));
                }
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![fmt17(*t)];
            for p in 0..self.grid.len() {
                row.extend(self.state(k, p).iter().map(|v| fmt17(*v)));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Binary dump, all little-endian:
    /// magic `b"FLOW"`, `u32` version 1, `u64` n_times, `u64` n_points,
    /// `u64` dim, then `n_times` times, `n_points x dim` initial points, and
    /// `n_times x n_points x dim` states as row-major `f64`.
    pub fn write_binary(&self, mut out: impl Write) -> Result<()> {
        let d = self.dim();
        out.write_all(b"FLOW")?;
        out.write_all(&1u32.to_le_bytes())?;
        for n in [self.times.len(), self.grid.len(), d] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        for t in &self.times {
            out.write_all(&t.to_le_bytes())?;
        }
        for p in 0..self.grid.len() {
            for v in self.grid.point(p) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.states {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Forward flow `φ_{s,t}` of every lattice point, all driven by `path`.
pub fn forward_flow(
    drift: &DriftSpec,
    path: &BrownianPath,
    grid: &FlowGrid,
    s: f64,
    t_list: &[f64],
) -> Result<FlowEnsemble> {
    forward_flow_with(drift, path, grid, s, t_list, Scheme::EulerMaruyama)
}

pub fn forward_flow_with(
    drift: &DriftSpec,
    path: &BrownianPath,
    grid: &FlowGrid,
    s: f64,
    t_list: &[f64],
    scheme: Scheme,
) -> Result<FlowEnsemble> {
    check_dims(drift, path, &grid.point(0))?;
    let ks = grid_index(path, s, "s")?;
    let mut wanted = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let k = grid_index(path, t, "t_list")?;
        if k < ks {
            return Err(invalid("t_list", format!("{t} precedes s = {s}")));
        }
        wanted.push(k);
    }
    let k_end = wanted.iter().copied().max().unwrap_or(ks);
    let d = grid.dim();
    let per_point: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let mut x = grid.point(p);
            let mut stored = vec![0.0; wanted.len() * d];
            march(drift, path, scheme, &mut x, ks, k_end, |k, xs| {
                for (slot, &kw) in wanted.iter().enumerate() {
                    if kw == k {
                        stored[slot * d..(slot + 1) * d].copy_from_slice(xs);
                    }
                }
                Ok(())
            })?;
            Ok(stored)
        })
        .collect::<Result<_>>()?;
    let n = grid.len();
    let mut states = vec![0.0; wanted.len() * n * d];
    for (p, stored) in per_point.iter().enumerate() {
        for slot in 0..wanted.len() {
            let off = (slot * n + p) * d;
            states[off..off + d].copy_from_slice(&stored[slot * d..(slot + 1) * d]);
        }
    }
    Ok(FlowEnsemble {
        grid: *grid,
        s,
        times: wanted.iter().map(|&k| path.time(k)).collect(),
        direction: FlowDirection::Forward,
        path: path.provenance(),
        states,
    })
}

/// `φ_{s,t}^{-1}(y)` via the backward equation
/// `Z_r = y - ∫_r^t b(q, Z_q) dq - (W_t - W_r)`, marched from `t` down to `s`.
pub fn inverse_flow_backward(
    drift: &DriftSpec,
    path: &BrownianPath,
    y: &[f64],
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(drift, path, y)?;
    let (ks, kt) = check_times(path, s, t)?;
    let dt = path.dt();
    let mut z = y.to_vec();
    let mut b = vec![0.0; y.len()];
    for k in (ks..kt).rev() {
        drift.eval_into(path.time(k + 1), &z, &mut b)?;
        let dw = path.increment(k);
        for i in 0..z.len() {
            z[i] -= b[i] * dt + dw[i];
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFiniteState {
                step: k,
                t: path.time(k),
            });
        }
    }
    Ok(z)
}

/// Backward ensemble: `φ_{s,t}^{-1}(y)` for lattice points `y` and each `t`.
pub fn backward_flow(
    drift: &DriftSpec,
    path: &BrownianPath,
    grid: &FlowGrid,
    s: f64,
    t_list: &[f64],
) -> Result<FlowEnsemble> {
    let d = grid.dim();
    let n = grid.len();
    let mut states = Vec::with_capacity(t_list.len() * n * d);
    for &t in t_list {
        let slice: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|p| inverse_flow_backward(drift, path, &grid.point(p), s, t))
            .collect::<Result<_>>()?;
        states.extend(slice.into_iter().flatten());
    }
    Ok(FlowEnsemble {
        grid: *grid,
        s,
        times: t_list.to_vec(),
        direction: FlowDirection::Backward,
        path: path.provenance(),
        states,
    })
}

/// Inverse of the forward map at stored time `t` by inverting the lattice
/// images: piecewise-linear in 1-D, bilinear cell inversion in 2-D.
pub fn inverse_flow_interpolate(ens: &FlowEnsemble, y: &[f64], t: f64) -> Result<Vec<f64>> {
    if ens.direction != FlowDirection::Forward {
        return Err(invalid("ens", "grid inversion needs a forward ensemble"));
    }
    if y.len() != ens.dim() {
        return Err(LabError::DimensionMismatch {
            expected: ens.dim(),
            got: y.len(),
        });
    }
    let k = ens.time_index(t)?;
    match ens.grid {
        FlowGrid::Line { lo, h, .. } => {
            let img = ens.images_1d(k);
            Ok(vec![invert_monotone(&img, lo, h, y[0])?])
        }
        FlowGrid::Plane { lo, h, n } => invert_quads(ens, k, lo, h, n, y),
    }
}

/// Preimage of `y` under the piecewise-linear map sending `lo + i h` to `img[i]`
/// (`img` increasing).
pub fn invert_monotone(img: &[f64], lo: f64, h: f64, y: f64) -> Result<f64> {
    let n = img.len();
    let (first, last) = (img[0], img[n - 1]);
    if !(y >= first && y <= last) {
        return Err(LabError::OutOfImage {
            y,
            lo: first,
            hi: last,
        });
    }
    let i = img.partition_point(|&v| v <= y).clamp(1, n - 1) - 1;
    let span = img[i + 1] - img[i];
    let frac = if span > 0.0 { (y - img[i]) / span } else { 0.0 };
    Ok(lo + (i as f64 + frac) * h)
}

fn invert_quads(
    ens: &FlowEnsemble,
    k: usize,
    lo: [f64; 2],
    h: f64,
    n: [usize; 2],
    y: &[f64],
) -> Result<Vec<f64>> {
    let node = |i: usize, j: usize| {
        let s = ens.state(k, i + n[0] * j);
        [s[0], s[1]]
    };
    for j in 0..n[1] - 1 {
        for i in 0..n[0] - 1 {
            let c = [
                node(i, j),
                node(i + 1, j),
                node(i + 1, j + 1),
                node(i, j + 1),
            ];
            let (xmin, xmax) = c
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                    (a.min(p[0]), b.max(p[0]))
                });
            let (ymin, ymax) = c
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                    (a.min(p[1]), b.max(p[1]))
                });
            if y[0] < xmin || y[0] > xmax || y[1] < ymin || y[1] > ymax {
                continue;
            }
            if let Some((u, v)) = invert_bilinear(&c, [y[0], y[1]]) {
                return Ok(vec![lo[0] + (i as f64 + u) * h, lo[1] + (j as f64 + v) * h]);
            }
        }
    }
    Err(LabError::OutOfMesh(y.to_vec()))
}

/// Local coordinates `(u, v) ∈ [0,1]²` of `y` in the bilinear quad `c`
/// (corners counter-clockwise from `(0,0)`), by Newton iteration.
fn invert_bilinear(c: &[[f64; 2]; 4], y: [f64; 2]) -> Option<(f64, f64)> {
    let map = |u: f64, v: f64| -> [f64; 2] {
        let mut p = [0.0; 2];
        for d in 0..2 {
            p[d] = (1.0 - u) * (1.0 - v) * c[0][d]
                + u * (1.0 - v) * c[1][d]
                + u * v * c[2][d]
                + (1.0 - u) * v * c[3][d];
        }
        p
    };
    let (mut u, mut v) = (0.5, 0.5);
    for _ in 0..50 {
        let p = map(u, v);
        let r = [p[0] - y[0], p[1] - y[1]];
        let mut jac = [[0.0; 2]; 2];
        for d in 0..2 {
            jac[d][0] = (1.0 - v) * (c[1][d] - c[0][d]) + v * (c[2][d] - c[3][d]);
            jac[d][1] = (1.0 - u) * (c[3][d] - c[0][d]) + u * (c[2][d] - c[1][d]);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 {
            return None;
        }
        let du = (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        let dv = (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det;
        u -= du;
        v -= dv;
        if du.abs() + dv.abs() < 1e-14 {
            break;
        }
    }
    let tol = 1e-10;
    (u >= -tol && u <= 1.0 + tol && v >= -tol && v <= 1.0 + tol)
        .then(|| (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)))
}

/// Finite-difference Jacobian determinant of the forward map at lattice
/// point `point`, with step equal to the lattice spacing.
pub fn jacobian_fd(ens: &FlowEnsemble, point: usize, t: f64) -> Result<f64> {
    let k = ens.time_index(t)?;
    let h = ens.grid.spacing();
    match ens.grid {
        FlowGrid::Line { n, .. } => {
            if point == 0 || point + 1 >= n {
                return Err(LabError::BoundaryPoint { index: point });
            }
            Ok((ens.state(k, point + 1)[0] - ens.state(k, point - 1)[0]) / (2.0 * h))
        }
        FlowGrid::Plane { n, .. } => {
            let (i, j) = (point % n[0], point / n[0]);
            if i == 0 || j == 0 || i + 1 >= n[0] || j + 1 >= n[1] {
                return Err(LabError::BoundaryPoint { index: point });
            }
            let col = |a: usize, b: usize| {
                let (p, q) = (ens.state(k, a), ens.state(k, b));
                [(p[0] - q[0]) / (2.0 * h), (p[1] - q[1]) / (2.0 * h)]
            };
            let cx = col(point + 1, point - 1);
            let cy = col(point + n[0], point - n[0]);
            Ok(cx[0] * cy[1] - cy[0] * cx[1])
        }
    }
}

/// `log Jφ_{s,t}(x) = ∫_s^t div b(r, φ_{s,r}(x)) dr` by the trapezoid rule
/// along the Euler trajectory.
pub fn jacobian_logdiv(
    drift: &DriftSpec,
    path: &BrownianPath,
    x: &[f64],
    s: f64,
    t: f64,
) -> Result<f64> {
    check_dims(drift, path, x)?;
    let (ks, kt) = check_times(path, s, t)?;
    let dt = path.dt();
    let mut state = x.to_vec();
    let mut acc = 0.0;
    euler(drift, path, &mut state, ks, kt, |k, xs| {
        let div = drift.divergence(path.time(k), xs, DIV_FD_STEP, DivergenceMode::Auto)?;
        let w = if k == ks || k == kt { 0.5 } else { 1.0 };
        acc += w * div * dt;
        Ok(())
    })?;
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianRecord {
    pub x: f64,
    pub t: f64,
    pub det_fd: f64,
    pub log_div: f64,
    pub h: f64,
}

/// Both Jacobian routes for a 1-D drift at `x`, with lattice step `h`.
pub fn jacobian_record_1d(
    drift: &DriftSpec,
    path: &BrownianPath,
    x: f64,
    t: f64,
    h: f64,
) -> Result<JacobianRecord> {
    let grid = FlowGrid::Line { lo: x - h, h, n: 3 };
    let ens = forward_flow(drift, path, &grid, 0.0, &[t])?;
    Ok(JacobianRecord {
        x,
        t,
        det_fd: jacobian_fd(&ens, 1, t)?,
        log_div: jacobian_logdiv(drift, path, &[x], 0.0, t)?,
        h,
    })
}

/// Closed-form forward flow of `x' = b(x)` for the 1-D capped Hölder drift,
/// started away from the origin (where it is unique). `t` may be negative as
/// long as the trajectory does not reach 0.
pub fn holder_flow_closed_form(gamma: f64, cap: f64, x0: f64, t: f64) -> f64 {
    if x0 == 0.0 {
        return 0.0;
    }
    let sign = x0.signum();
    let a = x0.abs();
    let speed_cap = cap.powf(gamma) / (1.0 - gamma);
    let q = 1.0 - gamma;
    let y = if a >= cap {
        let linear = a + speed_cap * t;
        if linear >= cap {
            linear
        } else {
            // re-enters the power region going backwards
            let t_in = (a - cap) / speed_cap;
            (cap.powf(q) + (t + t_in)).max(0.0).powf(1.0 / q)
        }
    } else {
        let u = a.powf(q) + t;
        let t_cap = cap.powf(q) - a.powf(q);
        if t > t_cap {
            cap + (t - t_cap) * speed_cap
        } else {
            u.max(0.0).powf(1.0 / q)
        }
    };
    sign * y
}

/// Upper extremal solution `x_+(t)` from the origin for the capped Hölder
/// drift (`x_-(t) = -x_+(t)`).
pub fn holder_extremal_branch(gamma: f64, cap: f64, t: f64) -> f64 {
    let q = 1.0 - gamma;
    let t_cap = cap.powf(q);
    if t <= t_cap {
        t.max(0.0).powf(1.0 / q)
    } else {
        cap + (t - t_cap) * cap.powf(gamma) / q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub delta: f64,
    pub sup_separation: f64,
    pub final_separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremalRow {
    pub plus: f64,
    pub minus: f64,
    pub separation: f64,
    /// Euler runs on the zero path seeded at `±f64::MIN_POSITIVE`.
    pub euler_plus: f64,
    pub euler_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub x0: f64,
    pub t: f64,
    pub stochastic: Vec<SeparationRow>,
    pub deterministic: Vec<SeparationRow>,
    /// Present for Hölder drifts started at the origin.
    pub extremal: Option<ExtremalRow>,
}

fn separation_1d(
    drift: &DriftSpec,
    path: &BrownianPath,
    x0: f64,
    delta: f64,
    t: f64,
) -> Result<SeparationRow> {
    let a = integrate_sde(drift, path, &[x0], 0.0, t)?;
    let b = integrate_sde(drift, path, &[x0 + delta], 0.0, t)?;
    let seps: Vec<f64> = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(p, q)| (p - q).abs())
        .collect();
    Ok(SeparationRow {
        delta,
        sup_separation: seps.iter().fold(0.0f64, |m, v| m.max(*v)),
        final_separation: *seps.last().unwrap_or(&0.0),
    })
}

/// Separation of trajectories from `x0` and `x0 + δ` under the same path,
/// with a companion run on the zero path.
pub fn pathwise_uniqueness_probe(
    drift: &DriftSpec,
    path: &BrownianPath,
    x0: f64,
    deltas: &[f64],
    t: f64,
) -> Result<UniquenessReport> {
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(invalid("delta_list", "perturbations must be non-negative"));
    }
    let zero = BrownianPath::zero(1, path.t_end(), path.dt())?;
    let stochastic = deltas
        .iter()
        .map(|&d| separation_1d(drift, path, x0, d, t))
        .collect::<Result<_>>()?;
    let deterministic = deltas
        .iter()
        .map(|&d| separation_1d(drift, &zero, x0, d, t))
        .collect::<Result<_>>()?;
    let extremal = match drift {
        DriftSpec::HolderPower {
            gamma,
            cap,
            signed: true,
        } if x0 == 0.0 => {
            let plus = holder_extremal_branch(*gamma, *cap, t);
            let euler_plus = flow_endpoint(drift, &zero, &[f64::MIN_POSITIVE], 0.0, t)?[0];
            let euler_minus = flow_endpoint(drift, &zero, &[-f64::MIN_POSITIVE], 0.0, t)?[0];
            Some(ExtremalRow {
                plus,
                minus: -plus,
                separation: 2.0 * plus,
                euler_plus,
                euler_minus,
            })
        }
        _ => None,
    };
    Ok(UniquenessReport {
        x0,
        t,
        stochastic,
        deterministic,
        extremal,
    })
}

/// Median final separation over an ensemble of paths, per δ.
pub fn median_separation(
    drift: &DriftSpec,
    paths: &[BrownianPath],
    x0: f64,
    deltas: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let per_path: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|p| {
            deltas
                .iter()
                .map(|&d| separation_1d(drift, p, x0, d, t).map(|r| r.final_separation))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..deltas.len())
        .map(|j| median(&per_path.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevRow {
    pub gamma: f64,
    pub eps: f64,
    /// Monte Carlo mean of `∫_0^T ∫_{-r}^{r} |D log Jφ_t(x)|² dx dt`.
    pub estimate: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolevTable {
    pub r: f64,
    pub h_x: f64,
    pub rows: Vec<SobolevRow>,
}

impl SobolevTable {
    /// Ratio of the estimate at the smallest to the largest `eps` for `gamma`.
    pub fn growth(&self, gamma: f64) -> Option<f64> {
        let rows: Vec<&SobolevRow> = self.rows.iter().filter(|r| r.gamma == gamma).collect();
        let coarse = rows.iter().max_by(|a, b| a.eps.total_cmp(&b.eps))?;
        let fine = rows.iter().min_by(|a, b| a.eps.total_cmp(&b.eps))?;
        Some(fine.estimate / coarse.estimate)
    }
}

/// `∫_0^T ∫_{-r}^{r} |D log Jφ_t(x)|² dx dt` on one path, with `log J` built
/// by the trapezoid rule along each lattice trajectory and `D` taken by
/// centered differences across the lattice.
pub fn sobolev_logj_energy(
    drift: &DriftSpec,
    path: &BrownianPath,
    r: f64,
    h_x: f64,
) -> Result<f64> {
    if drift.dim() != 1 || path.dim() != 1 {
        return Err(invalid("drift", "the Sobolev probe is one-dimensional"));
    }
    if !(r > 0.0 && h_x > 0.0 && h_x < r) {
        return Err(invalid("h_x", "need 0 < h_x < r"));
    }
    let n = (2.0 * r / h_x).round() as usize + 1;
    let dt = path.dt();
    let mut x: Vec<f64> = (0..n).map(|i| -r + i as f64 * h_x).collect();
    let mut logj = vec![0.0; n];
    let mut div_prev: Vec<f64> = x
        .iter()
        .map(|&xi| drift.divergence(0.0, &[xi], DIV_FD_STEP, DivergenceMode::Auto))
        .collect::<Result<_>>()?;
    let mut energy = 0.0;
    let slice_energy = |l: &[f64]| -> f64 {
        (1..n - 1)
            .map(|i| {
                let g = (l[i + 1] - l[i - 1]) / (2.0 * h_x);
                g * g * h_x
            })
            .sum()
    };
    let mut prev_slice = 0.0;
    for k in 0..path.n_steps() {
        let t = path.time(k);
        let dw = path.increment(k)[0];
        for xi in x.iter_mut() {
            *xi += drift.eval_1d(t, *xi)? * dt + dw;
        }
        for i in 0..n {
            let div = drift.divergence(t + dt, &[x[i]], DIV_FD_STEP, DivergenceMode::Auto)?;
            logj[i] += 0.5 * (div_prev[i] + div) * dt;
            div_prev[i] = div;
        }
        let cur = slice_energy(&logj);
        energy += 0.5 * (prev_slice + cur) * dt;
        prev_slice = cur;
    }
    Ok(energy)
}

/// Sobolev-energy table of `log Jφ` for mollified capped Hölder drifts,
/// over a `gamma` sweep and an `eps` ladder.
pub fn sobolev_jacobian_probe(
    paths: &[BrownianPath],
    r: f64,
    h_x: f64,
    cap: f64,
    gammas: &[f64],
    eps_ladder: &[f64],
    quad_points: usize,
) -> Result<SobolevTable> {
    if paths.len() < 2 {
        return Err(invalid("paths", "need at least two paths"));
    }
    let mut rows = Vec::new();
    for &gamma in gammas {
        for &eps in eps_ladder {
            let drift =
                crate::drift::mollify_drift(&DriftSpec::holder(gamma, cap), eps, quad_points)?;
            let samples: Vec<f64> = paths
                .par_iter()
                .map(|p| sobolev_logj_energy(&drift, p, r, h_x))
                .collect::<Result<_>>()?;
            let m = crate::stats::mean(&samples);
            rows.push(SobolevRow {
                gamma,
                eps,
                estimate: m,
                std_err: (crate::stats::variance(&samples) / samples.len() as f64).sqrt(),
            });
        }
    }
    Ok(SobolevTable { r, h_x, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeProbeReport {
    pub t: f64,
    pub dt: f64,
    /// `sup_k |X_k - X_0 - Σ_{j<k} b(t_j, X_j) dt - W_k|` for the branch `Y ≡ 0`.
    pub zero_branch_residual: f64,
    /// Same for the branch `Y = t²/4`.
    pub quadratic_branch_residual: f64,
    pub separation: f64,
}

fn sde_residual(drift: &DriftSpec, path: &BrownianPath, xs: &[f64], k_end: usize) -> Result<f64> {
    let dt = path.dt();
    let mut integral = 0.0;
    let mut worst = 0.0f64;
    for k in 0..k_end {
        integral += drift.eval_1d(path.time(k), xs[k])? * dt;
        let r = xs[k + 1] - xs[0] - integral - path.grid_value(k + 1)[0];
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Two solutions from `x0 = 0` of `dX = sqrt|X - W_t| dt + dW`: `X = W`
/// and `X = t²/4 + W`, each checked against the discretized equation.
pub fn random_drift_negative_probe(path: &BrownianPath, t: f64) -> Result<NegativeProbeReport> {
    if path.dim() != 1 {
        return Err(invalid("path", "the negative probe is one-dimensional"));
    }
    let kt = grid_index(path, t, "t")?;
    let drift = DriftSpec::RandomShiftSqrt {
        path: std::sync::Arc::new(path.clone()),
    };
    let w: Vec<f64> = (0..=kt).map(|k| path.grid_value(k)[0]).collect();
    let quad: Vec<f64> = (0..=kt)
        .map(|k| path.time(k).powi(2) / 4.0 + w[k])
        .collect();
    Ok(NegativeProbeReport {
        t,
        dt: path.dt(),
        zero_branch_residual: sde_residual(&drift, path, &w, kt)?,
        quadratic_branch_residual: sde_residual(&drift, path, &quad, kt)?,
        separation: (quad[kt] - w[kt]).abs(),
    })
}

/// Random ODE `X' = b(t, X) + W_n'(t)` on a grid of step `dt`, discretized as
/// `X_{k+1} = X_k + b(t_k, X_k) dt + W_n(t_{k+1}) - W_n(t_k)`.
pub fn wong_zakai_flow<P: PathSource>(
    drift: &DriftSpec,
    smoothed: &SmoothedPath<'_, P>,
    x0: &[f64],
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if x0.len() != drift.dim() {
        return Err(LabError::DimensionMismatch {
            expected: drift.dim(),
            got: x0.len(),
        });
    }
    if !(dt > 0.0 && t > 0.0) {
        return Err(invalid("dt", "need positive t and dt"));
    }
    let n_steps = (t / dt).round() as usize;
    let d = x0.len();
    let wn = smoothed.values_on_grid(dt, n_steps);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    for k in 0..n_steps {
        drift.eval_into(k as f64 * dt, &x, &mut b)?;
        for i in 0..d {
            x[i] += b[i] * dt + wn[(k + 1) * d + i] - wn[k * d + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_brownian;

    #[test]
    fn zero_drift_is_translation() {
        let path = sample_brownian(3, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        let tr = integrate_sde(&DriftSpec::zero(1), &path, &[0.4], 0.25, 1.0).unwrap();
        let w0 = path.evaluate_1d(0.25).unwrap();
        for (k, t) in tr.times.iter().enumerate() {
            let expect = 0.4 + path.evaluate_1d(*t).unwrap() - w0;
            assert!((tr.state(k)[0] - expect).abs() < 1e-13);
        }
        assert_eq!(tr.state(0), &[0.4]);
    }

    #[test]
    fn linear_drift_converges_first_order() {
        let mut errs = Vec::new();
        for n in [64usize, 128, 256, 512] {
            let path = BrownianPath::zero(1, 1.0, 1.0 / n as f64).unwrap();
            let x =
                flow_endpoint(&DriftSpec::scalar_linear(0.8, 1), &path, &[1.5], 0.0, 1.0).unwrap();
            errs.push((x[0] - 1.5 * 0.8f64.exp()).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 1.9 && ratio < 2.1, "{ratio}");
        }
    }

    #[test]
    fn holder_plus_branch_from_one() {
        let path = BrownianPath::zero(1, 0.5, 1.0 / 4096.0).unwrap();
        let x = flow_endpoint(&DriftSpec::holder(0.5, 2.0), &path, &[1.0], 0.0, 0.25).unwrap();
        assert!((x[0] - 1.25f64.powi(2)).abs() < 1e-3);
        assert!((holder_flow_closed_form(0.5, 2.0, 1.0, 0.25) - 1.5625).abs() < 1e-14);
    }

    #[test]
    fn closed_form_flow_is_a_group() {
        for (x0, a, b) in [
            (0.3, 0.5, 0.7),
            (-0.2, 1.0, 2.5),
            (3.0, -0.5, 0.2),
            (0.9, 0.4, -0.6),
        ] {
            let direct = holder_flow_closed_form(0.6, 1.5, x0, a + b);
            let composed =
                holder_flow_closed_form(0.6, 1.5, holder_flow_closed_form(0.6, 1.5, x0, a), b);
            assert!((direct - composed).abs() < 1e-12, "{x0} {a} {b}");
        }
    }

    #[test]
    fn rotation_flow_and_inverse() {
        let path = BrownianPath::zero(2, 1.0, 1.0 / 2048.0).unwrap();
        let rot = DriftSpec::Rotation2D { omega: 1.0 };
        let grid = FlowGrid::Plane {
            lo: [0.5, 0.0],
            h: 0.25,
            n: [3, 1],
        };
        let ens = forward_flow(&rot, &path, &grid, 0.0, &[1.0]).unwrap();
        for p in 0..3 {
            let x = grid.point(p);
            let (c, s) = (1f64.cos(), 1f64.sin());
            let expect = [c * x[0] - s * x[1], s * x[0] + c * x[1]];
            let got = ens.state(0, p);
            assert!((got[0] - expect[0]).abs() < 2e-3 && (got[1] - expect[1]).abs() < 2e-3);
            let back = inverse_flow_backward(&rot, &path, &expect, 0.0, 1.0).unwrap();
            assert!((back[0] - x[0]).abs() < 2e-3 && (back[1] - x[1]).abs() < 2e-3);
        }
    }

    #[test]
    fn backward_zero_drift_is_exact() {
        let path = sample_brownian(5, 1, 1, 1.0, 1.0 / 128.0).unwrap();
        let z = inverse_flow_backward(&DriftSpec::zero(1), &path, &[0.7], 0.0, 1.0).unwrap();
        assert!((z[0] - (0.7 - path.evaluate_1d(1.0).unwrap())).abs() < 1e-13);
    }

    #[test]
    fn interpolated_inverse_round_trips() {
        let path = sample_brownian(9, 0, 1, 1.0, 1.0 / 512.0).unwrap();
        let drift = DriftSpec::holder(0.5, 2.0);
        let grid = FlowGrid::line(-3.0, 3.0, 601).unwrap();
        let ens = forward_flow(&drift, &path, &grid, 0.0, &[0.0, 1.0]).unwrap();
        // identity at t = s
        let y = grid.point(100);
        assert_eq!(inverse_flow_interpolate(&ens, &y, 0.0).unwrap(), y);
        let img = ens.images_1d(1);
        assert!(img.windows(2).all(|w| w[1] > w[0]));
        let y = 0.5 * (img[250] + img[350]);
        let a = inverse_flow_interpolate(&ens, &[y], 1.0).unwrap()[0];
        let b = inverse_flow_backward(&drift, &path, &[y], 0.0, 1.0).unwrap()[0];
        assert!((a - b).abs() < 0.01 + 3.0 * path.dt().sqrt(), "{a} vs {b}");
        assert!(matches!(
            inverse_flow_interpolate(&ens, &[img[600] + 1.0], 1.0),
            Err(LabError::OutOfImage { .. })
        ));
    }

    #[test]
    fn planar_inverse_and_jacobian() {
        let path = sample_brownian(2, 2, 2, 1.0, 1.0 / 256.0).unwrap();
        let rot = DriftSpec::Rotation2D { omega: 2.0 };
        let grid = FlowGrid::square(-1.0, 1.0, 17).unwrap();
        let ens =
            forward_flow_with(&rot, &path, &grid, 0.0, &[1.0], Scheme::ImplicitMidpoint).unwrap();
        let centre = 8 + 17 * 8;
        assert!((jacobian_fd(&ens, centre, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // explicit Euler inflates areas by (1 + ω² dt²) per step
        let euler = forward_flow(&rot, &path, &grid, 0.0, &[1.0]).unwrap();
        let expect = (1.0 + 4.0 * path.dt() * path.dt()).powi(256);
        assert!((jacobian_fd(&euler, centre, 1.0).unwrap() - expect).abs() < 1e-10);
        assert!(matches!(
            jacobian_fd(&ens, 0, 1.0),
            Err(LabError::BoundaryPoint { index: 0 })
        ));
        let x0 = grid.point(centre + 3);
        let y = ens.state(0, centre + 3).to_vec();
        let back = inverse_flow_interpolate(&ens, &y, 1.0).unwrap();
        assert!((back[0] - x0[0]).abs() < 1e-9 && (back[1] - x0[1]).abs() < 1e-9);
        assert!(matches!(
            inverse_flow_interpolate(&ens, &[50.0, 50.0], 1.0),
            Err(LabError::OutOfMesh(_))
        ));
    }

    #[test]
    fn logdiv_closed_forms() {
        let path = sample_brownian(1, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        let l =
            jacobian_logdiv(&DriftSpec::scalar_linear(0.3, 1), &path, &[0.2], 0.25, 1.0).unwrap();
        assert!((l - 0.3 * 0.75).abs() < 1e-13);
        let path2 = sample_brownian(1, 0, 2, 1.0, 1.0 / 256.0).unwrap();
        let l = jacobian_logdiv(
            &DriftSpec::Rotation2D { omega: 1.0 },
            &path2,
            &[0.2, 0.1],
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn extremal_branches() {
        assert!((holder_extremal_branch(0.5, 2.0, 1.0) - 1.0).abs() < 1e-15);
        let path = sample_brownian(1, 0, 1, 1.0, 1.0 / 1024.0).unwrap();
        let rep =
            pathwise_uniqueness_probe(&DriftSpec::holder(0.5, 2.0), &path, 0.0, &[1e-2, 0.0], 1.0)
                .unwrap();
        let ext = rep.extremal.unwrap();
        assert!((ext.separation - 2.0).abs() < 1e-12);
        assert!((ext.euler_plus - 1.0).abs() < 0.05 && (ext.euler_minus + 1.0).abs() < 0.05);
        assert_eq!(rep.stochastic[1].sup_separation, 0.0);
        // Euler from exactly zero without noise stays at zero
        let zero = BrownianPath::zero(1, 1.0, 1.0 / 64.0).unwrap();
        assert_eq!(
            flow_endpoint(&DriftSpec::holder(0.5, 2.0), &zero, &[0.0], 0.0, 1.0).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn negative_probe_branches() {
        let path = sample_brownian(4, 0, 1, 1.0, 1.0 / 512.0).unwrap();
        let rep = random_drift_negative_probe(&path, 1.0).unwrap();
        assert_eq!(rep.zero_branch_residual, 0.0);
        assert!(rep.quadratic_branch_residual < 5.0 * path.dt());
        assert!((rep.separation - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let path = BrownianPath::zero(1, 1.0, 0.5).unwrap();
        let blow = DriftSpec::scalar_linear(1e308, 1);
        match integrate_sde(&blow, &path, &[10.0], 0.0, 1.0) {
            Err(LabError::NonFiniteState { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exports() {
        let path = sample_brownian(1, 0, 1, 1.0, 0.25).unwrap();
        let grid = FlowGrid::line(0.0, 1.0, 3).unwrap();
        let ens = forward_flow(&DriftSpec::zero(1), &path, &grid, 0.0, &[0.0, 0.5, 1.0]).unwrap();
        let mut csv = Vec::new();
        ens.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 4);
        let mut bin = Vec::new();
        ens.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..4], b"FLOW");
        assert_eq!(bin.len(), 4 + 4 + 24 + 8 * (3 + 3 + 9));
        let last = f64::from_le_bytes(bin[bin.len() - 8..].try_into().unwrap());
        assert_eq!(last, ens.state(2, 2)[0]);
    }
}
