//! Brownian paths and their Wong–Zakai smoothings.
//!
//! Paths are generated from a ChaCha stream keyed by `(seed, stream_id)`: the
//! seed selects the key and the stream id selects the ChaCha stream, so
//! ensemble member `i` is reproducible regardless of which thread builds it.
//!
//! Refinement ladders use [`BrownianPath::coarsen`]: a path at step
//! `dt * 2^k` is the fine path with consecutive increments summed, so every
//! rung of a ladder sees the same Brownian trajectory.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::kernel::Bump;
use crate::quad::gl_rule;

/// Generation parameters; enough to rebuild a sampled path bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub seed: u64,
    pub stream_id: u64,
    pub dim: usize,
    pub t_end: f64,
    pub dt: f64,
    /// Number of generated increments summed into each stored increment.
    #[serde(default = "one")]
    pub coarsen: usize,
}

fn one() -> usize {
    1
}

impl PathSpec {
    pub fn materialize(&self) -> Result<BrownianPath> {
        let fine = sample_brownian(self.seed, self.stream_id, self.dim, self.t_end, self.dt)?;
        if self.coarsen == 1 {
            Ok(fine)
        } else {
            fine.coarsen(self.coarsen)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    dim: usize,
    dt: f64,
    n_steps: usize,
    /// Row-major `n_steps x dim`.
    increments: Vec<f64>,
    /// Row-major `(n_steps + 1) x dim`, prefix sums of the increments.
    values: Vec<f64>,
    provenance: Option<PathSpec>,
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(invalid("T", format!("must be positive, got {t_end}")));
    }
    if !(dt > 0.0) || dt > t_end {
        return Err(invalid("dt", format!("must lie in (0, T], got {dt}")));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > n * f64::EPSILON * t_end {
        return Err(invalid("dt", format!("{dt} does not divide T = {t_end}")));
    }
    Ok(n as usize)
}

/// Sample a `d`-dimensional Brownian path on `[0, t_end]` with step `dt`.
pub fn sample_brownian(
    seed: u64,
    stream_id: u64,
    dim: usize,
    t_end: f64,
    dt: f64,
) -> Result<BrownianPath> {
    if dim == 0 {
        return Err(invalid("d", "dimension must be >= 1"));
    }
    let n_steps = steps_for(t_end, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    let scale = dt.sqrt();
    let increments: Vec<f64> = (0..n_steps * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    let mut path = BrownianPath::from_increments(dim, dt, increments)?;
    path.provenance = Some(PathSpec {
        seed,
        stream_id,
        dim,
        t_end,
        dt,
        coarsen: 1,
    });
    Ok(path)
}

impl BrownianPath {
    /// Path with explicitly supplied increments (deterministic test paths).
    pub fn from_increments(dim: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if dim == 0 || increments.len() % dim != 0 {
            return Err(invalid(
                "increments",
                "length must be a multiple of the dimension",
            ));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        let n_steps = increments.len() / dim;
        let mut values = vec![0.0; (n_steps + 1) * dim];
        for k in 0..n_steps {
            for i in 0..dim {
                values[(k + 1) * dim + i] = values[k * dim + i] + increments[k * dim + i];
            }
        }
        Ok(Self {
            dim,
            dt,
            n_steps,
            increments,
            values,
            provenance: None,
        })
    }

    /// The path W ≡ 0.
    pub fn zero(dim: usize, t_end: f64, dt: f64) -> Result<Self> {
        let n = steps_for(t_end, dt)?;
        Self::from_increments(dim, dt, vec![0.0; n * dim])
    }

    /// The 1-D path W(s) = slope * s.
    pub fn linear(t_end: f64, dt: f64, slope: f64) -> Result<Self> {
        let n = steps_for(t_end, dt)?;
        Self::from_increments(1, dt, vec![slope * dt; n])
    }

    /// Same trajectory on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(invalid(
                "factor",
                format!("{factor} does not divide {} steps", self.n_steps),
            ));
        }
        let n = self.n_steps / factor;
        let d = self.dim;
        let mut inc = vec![0.0; n * d];
        for k in 0..n {
            for i in 0..d {
                // differences of prefix sums so coarse grid values equal fine ones exactly
                inc[k * d + i] =
                    self.values[(k + 1) * factor * d + i] - self.values[k * factor * d + i];
            }
        }
        let mut path = Self::from_increments(d, self.dt * factor as f64, inc)?;
        for k in 0..=n {
            path.values[k * d..(k + 1) * d]
                .copy_from_slice(&self.values[k * factor * d..(k * factor + 1) * d]);
        }
        path.provenance = self.provenance.map(|p| PathSpec {
            coarsen: p.coarsen * factor,
            ..p
        });
        Ok(path)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_end(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn provenance(&self) -> Option<PathSpec> {
        self.provenance
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Increment `W(t_{k+1}) - W(t_k)`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// `W(t_k)` at grid index `k`.
    pub fn grid_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Grid index of `t`, if `t` lies on the grid (to rounding).
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.n_steps {
            return None;
        }
        ((k * self.dt - t).abs() <= 1e-9 * self.dt).then_some(k as usize)
    }

    /// `W(t)` with linear interpolation between grid times.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t_end = self.t_end();
        let slack = 1e-12 * t_end.max(1.0);
        if !(t >= -slack && t <= t_end + slack) {
            return Err(LabError::TimeOutOfRange {
                t,
                start: 0.0,
                end: t_end,
            });
        }
        let t = t.clamp(0.0, t_end);
        let pos = t / self.dt;
        let k = (pos.floor() as usize).min(self.n_steps);
        let frac = pos - k as f64;
        let d = self.dim;
        if k == self.n_steps || frac == 0.0 {
            out.copy_from_slice(&self.values[k * d..(k + 1) * d]);
        } else {
            for i in 0..d {
                let a = self.values[k * d + i];
                let b = self.values[(k + 1) * d + i];
                out[i] = a + frac * (b - a);
            }
        }
        Ok(())
    }

    /// Scalar value of a 1-D path.
    pub fn evaluate_1d(&self, t: f64) -> Result<f64> {
        let mut out = [0.0];
        self.evaluate_into(t, &mut out)?;
        Ok(out[0])
    }

    /// Largest `|W_i(t)|` over grid times and coordinates.
    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// CSV rows `t,W1,...,Wd` with 17 significant digits.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|i| format!("W{i}")).collect();
        writeln!(out, "t,{}", header.join(","))?;
        for k in 0..=self.n_steps {
            let row: Vec<String> = self.grid_value(k).iter().map(|v| fmt17(*v)).collect();
            writeln!(out, "{},{}", fmt17(self.time(k)), row.join(","))?;
        }
        Ok(())
    }
}

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl Serialize for BrownianPath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.provenance {
            Some(spec) => spec.serialize(s),
            None => Err(serde::ser::Error::custom(LabError::NoProvenance)),
        }
    }
}

impl<'de> Deserialize<'de> for BrownianPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = PathSpec::deserialize(d)?;
        spec.materialize().map_err(serde::de::Error::custom)
    }
}

/// Read access to a continuous path, so smoothing can run on instrumented or
/// synthetic sources.
pub trait PathSource {
    fn dim(&self) -> usize;
    fn t_end(&self) -> f64;
    /// Spacing of the knots between which the source is affine.
    fn knot_spacing(&self) -> f64;
    fn value_into(&self, t: f64, out: &mut [f64]);
}

impl PathSource for BrownianPath {
    fn dim(&self) -> usize {
        self.dim
    }
    fn t_end(&self) -> f64 {
        BrownianPath::t_end(self)
    }
    fn knot_spacing(&self) -> f64 {
        self.dt
    }
    fn value_into(&self, t: f64, out: &mut [f64]) {
        self.evaluate_into(t, out)
            .expect("smoothing queries stay inside [0, T]");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingKernel {
    /// Normalized C^∞ bump on (-1, 1).
    Bump,
    /// Hat function `1 - |r|` on (-1, 1); continuous only, no derivative rule.
    Hat,
}

/// Wong–Zakai smoothing `W_n(t) = ∫_0^∞ n θ(n(t-s)) W(s) ds`.
///
/// W is extended by 0 for s < 0 (the integral starts at 0) and by W(T) for s > T.
pub struct SmoothedPath<'a, P: PathSource> {
    base: &'a P,
    n: f64,
    kernel: SmoothingKernel,
    bump: Bump,
    rule: Vec<(f64, f64)>,
}

const NODES_PER_CELL: usize = 4;
const MIN_NODES: usize = 64;

pub fn wong_zakai_smooth<P: PathSource>(base: &P, n: usize) -> Result<SmoothedPath<'_, P>> {
    SmoothedPath::new(base, n, SmoothingKernel::Bump)
}

impl<'a, P: PathSource> SmoothedPath<'a, P> {
    pub fn new(base: &'a P, n: usize, kernel: SmoothingKernel) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "smoothing index must be >= 1"));
        }
        Ok(Self {
            base,
            n: n as f64,
            kernel,
            bump: Bump::new(1),
            rule: gl_rule(NODES_PER_CELL),
        })
    }

    pub fn index(&self) -> usize {
        self.n as usize
    }

    fn weight(&self, r: f64) -> f64 {
        // r = t - s
        match self.kernel {
            SmoothingKernel::Bump => self.bump.value_1d(r, 1.0 / self.n),
            SmoothingKernel::Hat => {
                let u = (self.n * r).abs();
                if u >= 1.0 {
                    0.0
                } else {
                    self.n * (1.0 - u)
                }
            }
        }
    }

    fn weight_dt(&self, r: f64) -> Option<f64> {
        match self.kernel {
            SmoothingKernel::Bump => Some(self.bump.derivative_1d(r, 1.0 / self.n)),
            SmoothingKernel::Hat => None,
        }
    }

    /// Cells of the integration window, split at the base path's knots.
    fn cells(&self, t: f64) -> Vec<(f64, f64)> {
        let half = 1.0 / self.n;
        let lo = (t - half).max(0.0);
        let hi = t + half;
        if hi <= lo {
            return Vec::new();
        }
        let h = self.base.knot_spacing();
        let t_end = self.base.t_end();
        let mut edges = vec![lo];
        let mut k = (lo / h).floor() as i64 + 1;
        loop {
            let knot = k as f64 * h;
            if knot >= hi.min(t_end) {
                break;
            }
            edges.push(knot);
            k += 1;
        }
        if t_end > lo && t_end < hi {
            edges.push(t_end);
        }
        edges.push(hi);
        // refine so at least MIN_NODES quadrature nodes land in the window
        let min_cells = MIN_NODES.div_ceil(NODES_PER_CELL);
        let refine = min_cells.div_ceil(edges.len() - 1).max(1);
        let mut cells = Vec::with_capacity((edges.len() - 1) * refine);
        for w in edges.windows(2) {
            let step = (w[1] - w[0]) / refine as f64;
            for j in 0..refine {
                cells.push((w[0] + j as f64 * step, w[0] + (j + 1) as f64 * step));
            }
        }
        cells
    }

    fn convolve(&self, t: f64, kernel: impl Fn(f64) -> f64, out: &mut [f64]) {
        let d = self.base.dim();
        let t_end = self.base.t_end();
        let mut w = vec![0.0; d];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, b) in self.cells(t) {
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for &(node, weight) in &self.rule {
                let s = mid + half * node;
                self.base.value_into(s.min(t_end), &mut w);
                let k = kernel(t - s) * weight * half;
                for i in 0..d {
                    out[i] += k * w[i];
                }
            }
        }
    }

    /// `W_n(t)`.
    pub fn value(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.base.dim()];
        self.convolve(t, |r| self.weight(r), &mut out);
        out
    }

    /// `dW_n/dt (t)`, the convolution against `n² θ'(n(t-s))`.
    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        if self.weight_dt(0.0).is_none() {
            return Err(invalid("kernel", "smoothing kernel has no derivative rule"));
        }
        let mut out = vec![0.0; self.base.dim()];
        self.convolve(t, |r| self.weight_dt(r).unwrap_or(0.0), &mut out);
        Ok(out)
    }

    /// `W_n` sampled at `t_k = k * dt`, `k = 0..=n_steps`, row-major.
    pub fn values_on_grid(&self, dt: f64, n_steps: usize) -> Vec<f64> {
        let d = self.base.dim();
        let mut out = vec![0.0; (n_steps + 1) * d];
        for k in 0..=n_steps {
            self.convolve(
                k as f64 * dt,
                |r| self.weight(r),
                &mut out[k * d..(k + 1) * d],
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{correlation, mean, variance};
    use std::cell::Cell;

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_brownian(1, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        let b = sample_brownian(1, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian(1, 1, 1, 1.0, 1.0 / 256.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_misaligned_grid() {
        assert!(sample_brownian(1, 0, 1, 1.0, 0.3).is_err());
        assert!(sample_brownian(1, 0, 1, 1.0, 0.0).is_err());
        assert!(sample_brownian(1, 0, 1, 1.0, 2.0).is_err());
        assert!(sample_brownian(1, 0, 1, 1.0, 0.1).is_ok());
    }

    #[test]
    fn terminal_value_is_standard_normal() {
        let n = 10_000;
        let ends: Vec<f64> = (0..n)
            .map(|i| {
                sample_brownian(7, i, 1, 1.0, 1.0 / 16.0)
                    .unwrap()
                    .grid_value(16)[0]
            })
            .collect();
        assert!(mean(&ends).abs() < 4.0 / (n as f64).sqrt());
        assert!((variance(&ends) - 1.0).abs() < 0.1);
    }

    #[test]
    fn coordinates_are_uncorrelated() {
        let n = 10_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let p = sample_brownian(3, i, 2, 1.0, 0.25).unwrap();
            a.push(p.grid_value(4)[0]);
            b.push(p.grid_value(4)[1]);
        }
        assert!(correlation(&a, &b).abs() < 0.05);
    }

    #[test]
    fn evaluation_at_and_between_grid_points() {
        let p = sample_brownian(2, 0, 2, 1.0, 0.125).unwrap();
        assert_eq!(p.evaluate(0.0).unwrap(), vec![0.0, 0.0]);
        let mut s = [0.0, 0.0];
        for k in 0..3 {
            s[0] += p.increment(k)[0];
            s[1] += p.increment(k)[1];
        }
        let w3 = p.evaluate(0.375).unwrap();
        assert!((w3[0] - s[0]).abs() < 1e-15 && (w3[1] - s[1]).abs() < 1e-15);
        let mid = p.evaluate(0.4375).unwrap();
        let (a, b) = (p.grid_value(3), p.grid_value(4));
        assert!((mid[0] - 0.5 * (a[0] + b[0])).abs() < 1e-15);
        assert!(p.evaluate(1.5).is_err());
        assert!(p.evaluate(-0.1).is_err());
    }

    #[test]
    fn coarsening_keeps_grid_values() {
        let p = sample_brownian(5, 2, 1, 1.0, 1.0 / 64.0).unwrap();
        let c = p.coarsen(4).unwrap();
        assert_eq!(c.n_steps(), 16);
        for k in 0..=16 {
            assert_eq!(c.grid_value(k), p.grid_value(4 * k));
        }
        assert_eq!(c.provenance().unwrap().coarsen, 4);
        assert_eq!(c.provenance().unwrap().materialize().unwrap(), c);
    }

    #[test]
    fn serde_roundtrip_through_provenance() {
        let p = sample_brownian(9, 3, 1, 0.5, 1.0 / 32.0).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: BrownianPath = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        let injected = BrownianPath::zero(1, 1.0, 0.5).unwrap();
        assert!(serde_json::to_string(&injected).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let p = sample_brownian(1, 0, 2, 1.0, 0.5).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,W1,W2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0.0000000000000000e0,"));
    }

    #[test]
    fn smoothing_zero_path_is_zero() {
        let p = BrownianPath::zero(1, 1.0, 1.0 / 64.0).unwrap();
        let s = wong_zakai_smooth(&p, 8).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(s.value(t), vec![0.0]);
            assert_eq!(s.derivative(t).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn smoothing_reproduces_affine_path_in_the_interior() {
        let p = BrownianPath::linear(1.0, 1.0 / 64.0, 1.0).unwrap();
        let n = 8;
        let s = wong_zakai_smooth(&p, n).unwrap();
        for t in [0.125, 0.3, 0.5, 0.875] {
            assert!((s.value(t)[0] - t).abs() < 1e-6, "t={t}");
            let dv = s.derivative(t).unwrap()[0];
            assert!((dv - 1.0).abs() < 1e-3, "t={t} dv={dv}");
        }
    }

    #[test]
    fn hat_kernel_has_no_derivative_rule() {
        let p = BrownianPath::linear(1.0, 0.25, 1.0).unwrap();
        let s = SmoothedPath::new(&p, 4, SmoothingKernel::Hat).unwrap();
        assert!((s.value(0.5)[0] - 0.5).abs() < 1e-12);
        assert!(s.derivative(0.5).is_err());
    }

    struct Probe<'a> {
        inner: &'a BrownianPath,
        latest: Cell<f64>,
    }

    impl PathSource for Probe<'_> {
        fn dim(&self) -> usize {
            1
        }
        fn t_end(&self) -> f64 {
            self.inner.t_end()
        }
        fn knot_spacing(&self) -> f64 {
            self.inner.dt()
        }
        fn value_into(&self, t: f64, out: &mut [f64]) {
            self.latest.set(self.latest.get().max(t));
            self.inner.value_into(t, out)
        }
    }

    #[test]
    fn smoothing_never_reads_beyond_the_window() {
        let p = sample_brownian(4, 0, 1, 1.0, 1.0 / 256.0).unwrap();
        for n in [4usize, 16, 64] {
            let probe = Probe {
                inner: &p,
                latest: Cell::new(0.0),
            };
            let s = wong_zakai_smooth(&probe, n).unwrap();
            for t in [0.1, 0.5, 0.7] {
                probe.latest.set(0.0);
                s.value(t);
                assert!(probe.latest.get() <= t + 1.0 / n as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn smoothing_error_shrinks_with_n() {
        let p = sample_brownian(11, 0, 1, 1.0, 1.0 / 1024.0).unwrap();
        let sup_err = |n: usize| {
            let s = wong_zakai_smooth(&p, n).unwrap();
            let vals = s.values_on_grid(1.0 / 1024.0, 1024);
            (0..=1024)
                .map(|k| (vals[k] - p.grid_value(k)[0]).abs())
                .fold(0.0f64, f64::max)
        };
        assert!(sup_err(64) < sup_err(8));
    }
}
