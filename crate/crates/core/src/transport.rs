//! One-dimensional transport equation `∂_t u + b ∂_x u + ∂_x u ∘ dW = 0`:
//! solutions by characteristics, the deterministic non-unique family,
//! weak-form residual checkers and commutators.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftSpec;
use crate::error::{invalid, LabError, Result};
use crate::field::SpaceTimeField;
use crate::flow::{
    forward_flow, holder_extremal_branch, holder_flow_closed_form, inverse_flow_backward,
    invert_monotone, FlowDirection, FlowEnsemble, FlowGrid,
};
use crate::kernel::{Bump, PolyBump, TestFn};
use crate::noise::BrownianPath;
use crate::quad::{integrate_cells, partition, trapezoid_uniform, ByParts};
use crate::stats::{loglog_slope, median};

pub type TestFunction = PolyBump;

/// Bounded initial datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDatum {
    /// `1_{x > threshold}`.
    Step { threshold: f64 },
    /// `exp(1 - 1/(1 - z²))` with `z = (x - center)/radius`; peak value 1.
    SmoothBump { center: f64, radius: f64 },
    /// Piecewise-linear interpolation of the first slice, extended by
    /// constants outside the grid.
    GridSampled { field: Arc<SpaceTimeField> },
}

impl InitialDatum {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitialDatum::Step { threshold } if !threshold.is_finite() => {
                Err(invalid("threshold", "must be finite"))
            }
            InitialDatum::SmoothBump { radius, center }
                if !(*radius > 0.0) || !center.is_finite() =>
            {
                Err(invalid("radius", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            InitialDatum::Step { .. } | InitialDatum::SmoothBump { .. } => 1.0,
            InitialDatum::GridSampled { field } => {
                field.slice(0).iter().fold(0.0f64, |m, v| m.max(v.abs()))
            }
        }
    }

    /// `(min, max)` of the datum.
    pub fn range(&self) -> (f64, f64) {
        match self {
            InitialDatum::Step { .. } | InitialDatum::SmoothBump { .. } => (0.0, 1.0),
            InitialDatum::GridSampled { field } => field
                .slice(0)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                }),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            InitialDatum::Step { threshold } => {
                if x > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            InitialDatum::SmoothBump { center, radius } => {
                let z = (x - center) / radius;
                let q = 1.0 - z * z;
                if q <= 0.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / q).exp()
                }
            }
            InitialDatum::GridSampled { field } => {
                let (i, frac) = grid_cell(field, x);
                let s = field.slice(0);
                s[i] + frac * (s[i + 1] - s[i])
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            InitialDatum::Step { .. } => 0.0,
            InitialDatum::SmoothBump { center, radius } => {
                let z = (x - center) / radius;
                let q = 1.0 - z * z;
                if q <= 0.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / q).exp() * (-2.0 * z / (q * q)) / radius
                }
            }
            InitialDatum::GridSampled { field } => {
                let m = &field.meta;
                if x < m.x_lo || x > m.x_hi {
                    return 0.0;
                }
                let (i, _) = grid_cell(field, x);
                let s = field.slice(0);
                (s[i + 1] - s[i]) / field.hx()
            }
        }
    }

    /// Jump locations.
    pub fn jumps(&self) -> Vec<f64> {
        match self {
            InitialDatum::Step { threshold } => vec![*threshold],
            _ => Vec::new(),
        }
    }
}

fn grid_cell(field: &SpaceTimeField, x: f64) -> (usize, f64) {
    let m = &field.meta;
    if m.n_x == 0 {
        return (0, 0.0);
    }
    let pos = ((x - m.x_lo) / field.hx()).clamp(0.0, m.n_x as f64);
    let i = (pos.floor() as usize).min(m.n_x - 1);
    (i, pos - i as f64)
}

/// Pointwise access to a space-time field `u(s, x)` for the residual
/// checkers. Values outside [`FieldProvider::domain`] or off the provider's
/// time grid are NaN.
pub trait FieldProvider: Sync {
    /// Interval on which `u(s, ·)` is available for every `s`.
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn value(&self, s: f64, x: f64) -> f64;

    /// Jump locations of `u(s, ·)`.
    fn jumps(&self, _s: f64) -> Vec<f64> {
        Vec::new()
    }

    /// `∂_x u(s, x)` away from jumps.
    fn derivative(&self, s: f64, x: f64) -> f64 {
        let h = 1e-6 * (1.0 + x.abs());
        (self.value(s, x + h) - self.value(s, x - h)) / (2.0 * h)
    }

    fn value_left(&self, s: f64, x: f64) -> f64 {
        self.value(s, x - 1e-12 * (1.0 + x.abs()))
    }

    fn value_right(&self, s: f64, x: f64) -> f64 {
        self.value(s, x + 1e-12 * (1.0 + x.abs()))
    }
}

/// `u ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub f64);

impl FieldProvider for ConstantField {
    fn value(&self, _s: f64, _x: f64) -> f64 {
        self.0
    }
    fn derivative(&self, _s: f64, _x: f64) -> f64 {
        0.0
    }
}

/// `u(s, x) = u₀(x - W_s)`, the solution for zero drift.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedDatum<'a> {
    pub u0: &'a InitialDatum,
    pub path: &'a BrownianPath,
}

impl ShiftedDatum<'_> {
    fn w(&self, s: f64) -> f64 {
        self.path.evaluate_1d(s).unwrap_or(f64::NAN)
    }
}

impl FieldProvider for ShiftedDatum<'_> {
    fn value(&self, s: f64, x: f64) -> f64 {
        self.u0.value(x - self.w(s))
    }
    fn jumps(&self, s: f64) -> Vec<f64> {
        let w = self.w(s);
        self.u0.jumps().into_iter().map(|j| j + w).collect()
    }
    fn derivative(&self, s: f64, x: f64) -> f64 {
        self.u0.derivative(x - self.w(s))
    }
}

/// Inverse-flow route for [`solve_by_characteristics`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InversionRoute {
    /// March the backward equation from each `x`.
    Backward,
    /// Invert a forward ensemble on the given lattice.
    Interpolate { grid: FlowGrid },
}

/// `u(t, x) = u₀(φ_t^{-1}(x))` at every point of `x_grid`.
pub fn solve_by_characteristics(
    drift: &DriftSpec,
    path: &BrownianPath,
    u0: &InitialDatum,
    t: f64,
    x_grid: &[f64],
    route: InversionRoute,
) -> Result<Vec<f64>> {
    u0.validate()?;
    if drift.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: drift.dim(),
        });
    }
    match route {
        InversionRoute::Backward => x_grid
            .par_iter()
            .map(|&x| Ok(u0.value(inverse_flow_backward(drift, path, &[x], 0.0, t)?[0])))
            .collect(),
        InversionRoute::Interpolate { grid } => {
            let FlowGrid::Line { lo, h, .. } = grid else {
                return Err(invalid("grid", "transport is one-dimensional"));
            };
            let ens = forward_flow(drift, path, &grid, 0.0, &[t])?;
            let img = ens.images_1d(0);
            x_grid
                .iter()
                .map(|&x| Ok(u0.value(invert_monotone(&img, lo, h, x)?)))
                .collect()
        }
    }
}

/// Position of `x` under the piecewise-linear map `lo + i h ↦ img[i]`.
fn forward_interpolate(img: &[f64], lo: f64, h: f64, x: f64) -> f64 {
    let n = img.len();
    let pos = ((x - lo) / h).clamp(0.0, (n - 1) as f64);
    let i = (pos.floor() as usize).min(n - 2);
    let frac = pos - i as f64;
    img[i] + frac * (img[i + 1] - img[i])
}

/// Characteristics solution `u(s, x) = u₀(φ_s^{-1}(x))` on every step of
/// the path grid up to `t`, backed by one forward ensemble.
#[derive(Debug, Clone)]
pub struct CharacteristicsSolution {
    u0: InitialDatum,
    lo: f64,
    h: f64,
    dt: f64,
    images: Vec<Vec<f64>>,
    domain: (f64, f64),
}

impl CharacteristicsSolution {
    pub fn new(
        drift: &DriftSpec,
        path: &BrownianPath,
        u0: &InitialDatum,
        grid: &FlowGrid,
        t: f64,
    ) -> Result<Self> {
        u0.validate()?;
        let FlowGrid::Line { lo, h, .. } = *grid else {
            return Err(invalid("grid", "transport is one-dimensional"));
        };
        let kt = path
            .grid_index(t)
            .ok_or_else(|| invalid("t", format!("{t} is not on the path grid")))?;
        let times: Vec<f64> = (0..=kt).map(|k| path.time(k)).collect();
        let ens = forward_flow(drift, path, grid, 0.0, &times)?;
        let images: Vec<Vec<f64>> = (0..=kt).map(|k| ens.images_1d(k)).collect();
        let domain = images
            .iter()
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), img| {
                (a.max(img[0]), b.min(img[img.len() - 1]))
            });
        Ok(Self {
            u0: u0.clone(),
            lo,
            h,
            dt: path.dt(),
            images,
            domain,
        })
    }

    fn slot(&self, s: f64) -> Option<&[f64]> {
        let pos = s / self.dt;
        let k = pos.round();
        if (pos - k).abs() > 1e-6 || k < 0.0 {
            return None;
        }
        self.images.get(k as usize).map(Vec::as_slice)
    }

    /// `φ_s^{-1}(x)` by lattice inversion.
    pub fn inverse(&self, s: f64, x: f64) -> Result<f64> {
        let img = self
            .slot(s)
            .ok_or_else(|| invalid("s", format!("{s} is not a stored time")))?;
        invert_monotone(img, self.lo, self.h, x)
    }
}

impl FieldProvider for CharacteristicsSolution {
    fn domain(&self) -> (f64, f64) {
        self.domain
    }

    fn value(&self, s: f64, x: f64) -> f64 {
        match self.inverse(s, x) {
            Ok(y) => self.u0.value(y),
            Err(_) => f64::NAN,
        }
    }

    fn jumps(&self, s: f64) -> Vec<f64> {
        match self.slot(s) {
            Some(img) => self
                .u0
                .jumps()
                .into_iter()
                .map(|j| forward_interpolate(img, self.lo, self.h, j))
                .collect(),
            None => Vec::new(),
        }
    }

    fn derivative(&self, s: f64, x: f64) -> f64 {
        let Some(img) = self.slot(s) else {
            return f64::NAN;
        };
        let n = img.len();
        if x < img[0] || x > img[n - 1] {
            return f64::NAN;
        }
        let i = img.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let span = img[i + 1] - img[i];
        let Ok(y) = invert_monotone(img, self.lo, self.h, x) else {
            return f64::NAN;
        };
        self.u0.derivative(y) * self.h / span
    }
}

/// Branch function `γ_±` of the deterministic family.
pub type Branch = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn constant_branch(a: f64) -> Branch {
    Arc::new(move |_| a)
}

/// Time the upper extremal branch needs to reach `|x|`.
fn extremal_hitting_time(gamma: f64, cap: f64, x: f64) -> f64 {
    let q = 1.0 - gamma;
    let a = x.abs();
    if a <= cap {
        a.powf(q)
    } else {
        cap.powf(q) + (a - cap) * q / cap.powf(gamma)
    }
}

/// Member of the non-unique family of bounded weak solutions for the capped
/// Hölder drift without noise:
///
/// * `x > x₊(t)`: `u₀(φ_t^{-1}(x))`
/// * `0 ≤ x ≤ x₊(t)`: `γ₊(t₀(t, x))`
/// * `x₋(t) ≤ x < 0`: `γ₋(t₀(t, x))`
/// * `x < x₋(t)`: `u₀(φ_t^{-1}(x))`
///
/// where `t₀` is the time at which the extremal branch through `x` leaves
/// the origin.
pub fn deterministic_family(
    gamma: f64,
    cap: f64,
    u0: &InitialDatum,
    gamma_plus: &dyn Fn(f64) -> f64,
    gamma_minus: &dyn Fn(f64) -> f64,
    t: f64,
    x: f64,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("gamma", "must lie in (0, 1)"));
    }
    if !(cap > 0.0) {
        return Err(invalid("cap", "must be positive"));
    }
    if !(t > 0.0) {
        return Err(invalid("t", "must be positive"));
    }
    Ok(family_value(gamma, cap, u0, gamma_plus, gamma_minus, t, x))
}

fn family_value(
    gamma: f64,
    cap: f64,
    u0: &InitialDatum,
    gamma_plus: &dyn Fn(f64) -> f64,
    gamma_minus: &dyn Fn(f64) -> f64,
    t: f64,
    x: f64,
) -> f64 {
    let xp = holder_extremal_branch(gamma, cap, t);
    if x > xp || x < -xp {
        u0.value(holder_flow_closed_form(gamma, cap, x, -t))
    } else {
        let t0 = t - extremal_hitting_time(gamma, cap, x);
        if x >= 0.0 {
            gamma_plus(t0)
        } else {
            gamma_minus(t0)
        }
    }
}

/// [`deterministic_family`] as a field provider (`u(0, ·) = u₀`).
#[derive(Clone)]
pub struct DeterministicFamily {
    pub gamma: f64,
    pub cap: f64,
    pub u0: InitialDatum,
    pub plus: Branch,
    pub minus: Branch,
}

impl std::fmt::Debug for DeterministicFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeterministicFamily")
            .field("gamma", &self.gamma)
            .field("cap", &self.cap)
            .field("u0", &self.u0)
            .finish_non_exhaustive()
    }
}

impl DeterministicFamily {
    pub fn new(
        gamma: f64,
        cap: f64,
        u0: InitialDatum,
        plus: Branch,
        minus: Branch,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid("gamma", "must lie in (0, 1)"));
        }
        if !(cap > 0.0) {
            return Err(invalid("cap", "must be positive"));
        }
        u0.validate()?;
        Ok(Self {
            gamma,
            cap,
            u0,
            plus,
            minus,
        })
    }

    /// Member with constant branches `γ₊ ≡ a₊`, `γ₋ ≡ a₋`.
    pub fn constant(
        gamma: f64,
        cap: f64,
        u0: InitialDatum,
        a_plus: f64,
        a_minus: f64,
    ) -> Result<Self> {
        Self::new(
            gamma,
            cap,
            u0,
            constant_branch(a_plus),
            constant_branch(a_minus),
        )
    }

    pub fn x_plus(&self, t: f64) -> f64 {
        holder_extremal_branch(self.gamma, self.cap, t)
    }
}

impl FieldProvider for DeterministicFamily {
    fn value(&self, s: f64, x: f64) -> f64 {
        if s <= 0.0 {
            return self.u0.value(x);
        }
        family_value(
            self.gamma,
            self.cap,
            &self.u0,
            &*self.plus,
            &*self.minus,
            s,
            x,
        )
    }

    fn jumps(&self, s: f64) -> Vec<f64> {
        if s <= 0.0 {
            return self.u0.jumps();
        }
        let xp = self.x_plus(s);
        let mut out = vec![-xp, 0.0, xp];
        for j in self.u0.jumps() {
            if j != 0.0 {
                out.push(holder_flow_closed_form(self.gamma, self.cap, j, s));
            }
        }
        out
    }
}

/// A field transported rigidly by the noise, `u(s, x) = v(s, x - W_s)`.
/// Applied to a deterministic family member it gives the naive candidate
/// that ignores the interaction between drift and noise.
pub struct NoiseShifted<'a, F: FieldProvider> {
    pub inner: &'a F,
    pub path: &'a BrownianPath,
}

impl<F: FieldProvider> NoiseShifted<'_, F> {
    fn w(&self, s: f64) -> f64 {
        self.path.evaluate_1d(s).unwrap_or(f64::NAN)
    }
}

impl<F: FieldProvider> FieldProvider for NoiseShifted<'_, F> {
    fn value(&self, s: f64, x: f64) -> f64 {
        self.inner.value(s, x - self.w(s))
    }
    fn jumps(&self, s: f64) -> Vec<f64> {
        let w = self.w(s);
        self.inner.jumps(s).into_iter().map(|j| j + w).collect()
    }
    fn derivative(&self, s: f64, x: f64) -> f64 {
        self.inner.derivative(s, x - self.w(s))
    }
}

/// Spatial quadrature for the residual checkers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualQuad {
    /// Cells over the (unshifted) integration window.
    pub n_x: usize,
    /// Fixed window containing the support of the test function; defaults
    /// to the support itself. A shared window makes checks on different
    /// test functions use identical nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(f64, f64)>,
}

impl ResidualQuad {
    pub fn cells(n_x: usize) -> Self {
        Self { n_x, window: None }
    }

    fn window(&self, theta: &dyn TestFn) -> Result<(f64, f64)> {
        if self.n_x == 0 {
            return Err(invalid("n_x", "must be positive"));
        }
        let (c_lo, c_hi) = theta.support();
        match self.window {
            None => Ok((c_lo, c_hi)),
            Some((a, b)) if a <= c_lo && b >= c_hi => Ok((a, b)),
            Some(_) => Err(invalid(
                "window",
                "must contain the support of the test function",
            )),
        }
    }
}

/// Outcome of a weak-form check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Contribution of the `div b` term to `rhs`.
    pub div_term: f64,
}

fn check_box(u: &dyn FieldProvider, need_lo: f64, need_hi: f64) -> Result<()> {
    let (have_lo, have_hi) = u.domain();
    if need_lo < have_lo || need_hi > have_hi {
        return Err(LabError::QuadratureBox {
            have_lo,
            have_hi,
            need_lo,
            need_hi,
        });
    }
    Ok(())
}

fn in_open(points: Vec<f64>, a: f64, b: f64) -> Vec<f64> {
    points.into_iter().filter(|&p| p > a && p < b).collect()
}

/// `∫_a^b u(s, x) f(x) dx` with cells split at the jumps of `u(s, ·)` and
/// at `extra`.
fn pair(
    u: &dyn FieldProvider,
    s: f64,
    a: f64,
    b: f64,
    n: usize,
    extra: &[f64],
    f: impl Fn(f64) -> f64,
) -> f64 {
    let mut breaks = in_open(u.jumps(s), a, b);
    breaks.extend_from_slice(extra);
    integrate_cells(&partition(a, b, n, &breaks), |x| u.value(s, x) * f(x))
}

/// `∫ b θ_σ' u_s dx` and `∫ div b θ_σ u_s dx` for `θ_σ = θ(· + shift)`; the
/// second is integrated by parts against `b` so that singular `div b` is
/// never evaluated.
fn drift_terms(
    u: &dyn FieldProvider,
    drift: &DriftSpec,
    theta: &dyn TestFn,
    s: f64,
    shift: f64,
    (c_lo, c_hi): (f64, f64),
    n: usize,
) -> (f64, f64) {
    let (a, b) = (c_lo - shift, c_hi - shift);
    let kinks = in_open(drift.kinks_1d(), a, b);
    let jumps = in_open(u.jumps(s), a, b);
    let bx = |x: f64| drift.eval_1d(s, x).unwrap_or(f64::NAN);
    let transport = pair(u, s, a, b, n, &kinks, |x| {
        bx(x) * theta.derivative(x + shift)
    });
    let w_right = |x: f64| theta.value(x + shift) * u.value_right(s, x);
    let w_left = |x: f64| theta.value(x + shift) * u.value_left(s, x);
    let w_prime = |x: f64| {
        theta.derivative(x + shift) * u.value(s, x) + theta.value(x + shift) * u.derivative(s, x)
    };
    let div = ByParts {
        v: &bx,
        w_right: &w_right,
        w_left: &w_left,
        w_prime: &w_prime,
    }
    .integrate(a, b, n, &jumps, &kinks);
    (transport, div)
}

fn path_index(path: &BrownianPath, t: f64) -> Result<usize> {
    if path.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: path.dim(),
        });
    }
    let k = path
        .grid_index(t)
        .ok_or_else(|| invalid("t", format!("{t} is not on the path grid")))?;
    if k == 0 {
        return Err(invalid("t", "must be positive"));
    }
    Ok(k)
}

fn finished(lhs: f64, rhs: f64, div_term: f64) -> Result<ResidualReport> {
    if !(lhs.is_finite() && rhs.is_finite()) {
        return Err(invalid("u", "field is not finite on the quadrature box"));
    }
    Ok(ResidualReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
        div_term,
    })
}

/// Residual of the pathwise form
/// `u_t(θ) = ∫u₀ θ(·+W_t) + ∫₀ᵗ ∫ [b θ'(x+W_t-W_s) + div b θ(x+W_t-W_s)] u_s dx ds`,
/// with `n_x` spatial cells and the trapezoid rule on the path grid in time.
pub fn perturbative_residual(
    u: &dyn FieldProvider,
    drift: &DriftSpec,
    theta: &dyn TestFn,
    path: &BrownianPath,
    t: f64,
    quad: ResidualQuad,
) -> Result<ResidualReport> {
    let kt = path_index(path, t)?;
    let (c_lo, c_hi) = quad.window(theta)?;
    let n_x = quad.n_x;
    if drift.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: drift.dim(),
        });
    }
    let w: Vec<f64> = (0..=kt).map(|k| path.grid_value(k)[0]).collect();
    let shifts: Vec<f64> = w.iter().map(|wk| w[kt] - wk).collect();
    let max_shift = shifts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_shift = shifts.iter().copied().fold(f64::INFINITY, f64::min);
    check_box(u, c_lo - max_shift, c_hi - min_shift)?;

    let lhs = pair(u, path.time(kt), c_lo, c_hi, n_x, &[], |x| theta.value(x));
    let initial = pair(u, 0.0, c_lo - shifts[0], c_hi - shifts[0], n_x, &[], |x| {
        theta.value(x + shifts[0])
    });
    let terms: Vec<(f64, f64)> = (0..=kt)
        .into_par_iter()
        .map(|k| drift_terms(u, drift, theta, path.time(k), shifts[k], (c_lo, c_hi), n_x))
        .collect();
    let dt = path.dt();
    let transport = trapezoid_uniform(&terms.iter().map(|p| p.0).collect::<Vec<_>>(), dt);
    let div = trapezoid_uniform(&terms.iter().map(|p| p.1).collect::<Vec<_>>(), dt);
    finished(lhs, initial + transport + div, div)
}

/// Residual of the Itô weak form
/// `u_t(θ) = u₀(θ) + ∫₀ᵗ∫ (b θ)' u_s + Σ_k (∫u_{t_k} θ') ΔW_k + ½∫₀ᵗ∫ u_s θ''`
/// with left-point sums on the path grid.
pub fn weak_residual_ito(
    u: &dyn FieldProvider,
    drift: &DriftSpec,
    theta: &dyn TestFn,
    path: &BrownianPath,
    t: f64,
    quad: ResidualQuad,
) -> Result<ResidualReport> {
    let kt = path_index(path, t)?;
    let (c_lo, c_hi) = quad.window(theta)?;
    let n_x = quad.n_x;
    if drift.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: drift.dim(),
        });
    }
    check_box(u, c_lo, c_hi)?;
    let lhs = pair(u, path.time(kt), c_lo, c_hi, n_x, &[], |x| theta.value(x));
    let initial = pair(u, 0.0, c_lo, c_hi, n_x, &[], |x| theta.value(x));
    let per_step: Vec<(f64, f64, f64, f64)> = (0..=kt)
        .into_par_iter()
        .map(|k| {
            let s = path.time(k);
            let (tr, dv) = drift_terms(u, drift, theta, s, 0.0, (c_lo, c_hi), n_x);
            let grad = pair(u, s, c_lo, c_hi, n_x, &[], |x| theta.derivative(x));
            let lap = pair(u, s, c_lo, c_hi, n_x, &[], |x| theta.second_derivative(x));
            (tr, dv, grad, lap)
        })
        .collect();
    let dt = path.dt();
    let transport = trapezoid_uniform(&per_step.iter().map(|p| p.0).collect::<Vec<_>>(), dt);
    let div = trapezoid_uniform(&per_step.iter().map(|p| p.1).collect::<Vec<_>>(), dt);
    let ito: f64 = (0..kt).map(|k| per_step[k].2 * path.increment(k)[0]).sum();
    let half = 0.5 * trapezoid_uniform(&per_step.iter().map(|p| p.3).collect::<Vec<_>>(), dt);
    finished(lhs, initial + transport + div + ito + half, div)
}

/// Cell counts for the nested commutator quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutatorQuad {
    /// Cells over the support of `ρ`.
    pub outer_cells: usize,
    /// Cells over each mollifier window `[y - ε, y + ε]`.
    pub inner_cells: usize,
}

impl Default for CommutatorQuad {
    fn default() -> Self {
        Self {
            outer_cells: 512,
            inner_cells: 64,
        }
    }
}

fn kernel() -> &'static Bump {
    static K: std::sync::OnceLock<Bump> = std::sync::OnceLock::new();
    K.get_or_init(|| Bump::new(1))
}

/// `R_ε[v, g](y) = ϑ_ε∗(v g')(y) - v(y) (ϑ_ε∗g)'(y)` with the distributional
/// product expanded by parts:
/// `∫ g(x)ϑ_ε'(y-x)[v(x)-v(y)]dx - ∫ g(x)ϑ_ε(y-x) v'(x) dx`,
/// the last integral again by parts against `v`.
fn commutator_density(
    v: &DriftSpec,
    g: &dyn FieldProvider,
    s: f64,
    eps: f64,
    inner: usize,
    y: f64,
) -> f64 {
    let k = kernel();
    let (a, b) = (y - eps, y + eps);
    let vx = |x: f64| v.eval_1d(s, x).unwrap_or(f64::NAN);
    let vy = vx(y);
    let kinks = in_open(v.kinks_1d(), a, b);
    let jumps = in_open(g.jumps(s), a, b);
    let mut breaks = jumps.clone();
    breaks.extend_from_slice(&kinks);
    let first = integrate_cells(&partition(a, b, inner, &breaks), |x| {
        g.value(s, x) * k.derivative_1d(y - x, eps) * (vx(x) - vy)
    });
    let w_right = |x: f64| g.value_right(s, x) * k.value_1d(y - x, eps);
    let w_left = |x: f64| g.value_left(s, x) * k.value_1d(y - x, eps);
    let w_prime = |x: f64| {
        g.derivative(s, x) * k.value_1d(y - x, eps) - g.value(s, x) * k.derivative_1d(y - x, eps)
    };
    let second = ByParts {
        v: &vx,
        w_right: &w_right,
        w_left: &w_left,
        w_prime: &w_prime,
    }
    .integrate(a, b, inner, &jumps, &kinks);
    first - second
}

/// Outer partition of `[a, b]`: uniform cells split at kinks of `v` and with
/// each jump window `[j - ε, j + ε]` of `g` resolved by its own cells.
fn outer_nodes(
    v: &DriftSpec,
    g: &dyn FieldProvider,
    s: f64,
    eps: f64,
    a: f64,
    b: f64,
    quad: CommutatorQuad,
) -> Vec<f64> {
    let mut breaks = v.kinks_1d();
    for j in g.jumps(s) {
        let m = quad.inner_cells.max(2);
        breaks.extend((0..=m).map(|i| j - eps + 2.0 * eps * i as f64 / m as f64));
    }
    partition(a, b, quad.outer_cells, &in_open(breaks, a, b))
}

fn check_commutator(
    g: &dyn FieldProvider,
    eps: f64,
    lo: f64,
    hi: f64,
    quad: CommutatorQuad,
) -> Result<()> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    if quad.outer_cells == 0 || quad.inner_cells == 0 {
        return Err(invalid("quad", "cell counts must be positive"));
    }
    check_box(g, lo - eps, hi + eps)
}

/// `∫ R_ε[v, g](y) ρ(y) dy` for the field `g(s, ·)`.
pub fn commutator(
    v: &DriftSpec,
    g: &dyn FieldProvider,
    s: f64,
    eps: f64,
    rho: &dyn TestFn,
    quad: CommutatorQuad,
) -> Result<f64> {
    let (lo, hi) = rho.support();
    check_commutator(g, eps, lo, hi, quad)?;
    let nodes = outer_nodes(v, g, s, eps, lo, hi, quad);
    integrate_outer(&nodes, |y| {
        commutator_density(v, g, s, eps, quad.inner_cells, y) * rho.value(y)
    })
}

fn integrate_outer(nodes: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Result<f64> {
    let pieces: Vec<f64> = nodes
        .par_windows(2)
        .map(|w| integrate_cells(w, &f))
        .collect();
    let total: f64 = pieces.iter().sum();
    if !total.is_finite() {
        return Err(invalid(
            "g",
            "commutator integrand is not finite on the quadrature box",
        ));
    }
    Ok(total)
}

/// `∫ R_ε[v, g](φ_t(x)) ρ(x) dx`, evaluated as
/// `∫ R_ε[v, g](y) ρ(φ_t^{-1}(y)) Jφ_t^{-1}(y) dy` with the inverse and its
/// Jacobian taken from a forward 1-D ensemble.
pub fn commutator_along_flow(
    v: &DriftSpec,
    g: &dyn FieldProvider,
    s: f64,
    eps: f64,
    rho: &dyn TestFn,
    ens: &FlowEnsemble,
    t: f64,
    quad: CommutatorQuad,
) -> Result<f64> {
    if ens.direction != FlowDirection::Forward {
        return Err(invalid("ens", "needs a forward ensemble"));
    }
    let FlowGrid::Line { lo: g_lo, h, n } = ens.grid else {
        return Err(invalid("ens", "transport is one-dimensional"));
    };
    let k = ens.time_index(t)?;
    let img = ens.images_1d(k);
    let (r_lo, r_hi) = rho.support();
    let g_hi = g_lo + (n - 1) as f64 * h;
    if r_lo < g_lo || r_hi > g_hi {
        return Err(LabError::QuadratureBox {
            have_lo: g_lo,
            have_hi: g_hi,
            need_lo: r_lo,
            need_hi: r_hi,
        });
    }
    let (lo, hi) = (
        forward_interpolate(&img, g_lo, h, r_lo),
        forward_interpolate(&img, g_lo, h, r_hi),
    );
    check_commutator(g, eps, lo, hi, quad)?;
    // derivative of φ_t at lattice nodes by centered differences
    let slope: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                (img[1] - img[0]) / h
            } else if i == n - 1 {
                (img[n - 1] - img[n - 2]) / h
            } else {
                (img[i + 1] - img[i - 1]) / (2.0 * h)
            }
        })
        .collect();
    let weight = |y: f64| -> f64 {
        let Ok(x) = invert_monotone(&img, g_lo, h, y) else {
            return f64::NAN;
        };
        let pos = ((x - g_lo) / h).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        let d = slope[i] + frac * (slope[i + 1] - slope[i]);
        rho.value(x) / d
    };
    let nodes = outer_nodes(v, g, s, eps, lo, hi, quad);
    integrate_outer(&nodes, |y| {
        commutator_density(v, g, s, eps, quad.inner_cells, y) * weight(y)
    })
}

/// Commutator values over a decreasing `ε` ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommutatorReport {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    /// Log-log slope of `|value|` against `ε`.
    pub exponent: Option<f64>,
}

impl CommutatorReport {
    pub fn new(eps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if eps.len() != values.len() || eps.is_empty() {
            return Err(invalid(
                "eps",
                "ladder and values must have equal nonzero length",
            ));
        }
        if eps.windows(2).any(|w| !(w[1] < w[0])) || eps.iter().any(|e| !(*e > 0.0)) {
            return Err(invalid(
                "eps",
                "ladder must be positive and strictly decreasing",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("values", "must be finite"));
        }
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let exponent = loglog_slope(&eps, &abs);
        Ok(Self {
            eps,
            values,
            exponent,
        })
    }

    /// `|value|` strictly decreasing as `ε` decreases.
    pub fn monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1].abs() < w[0].abs())
    }
}

/// [`commutator`] over an `ε` ladder.
pub fn commutator_ladder(
    v: &DriftSpec,
    g: &dyn FieldProvider,
    s: f64,
    eps: &[f64],
    rho: &dyn TestFn,
    quad: CommutatorQuad,
) -> Result<CommutatorReport> {
    let values = eps
        .iter()
        .map(|&e| commutator(v, g, s, e, rho, quad))
        .collect::<Result<Vec<_>>>()?;
    CommutatorReport::new(eps.to_vec(), values)
}

/// Discretization knobs for [`uniqueness_gap_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapParams {
    pub gamma: f64,
    pub cap: f64,
    pub t: f64,
    pub theta: PolyBump,
    /// Spatial quadrature cells.
    pub n_x: usize,
    /// Time steps (noise-off runs; noise-on runs use the path grid).
    pub n_s: usize,
    /// Lattice points of the forward ensemble behind the characteristics
    /// solution.
    pub flow_points: usize,
    pub flow_half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub a: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOffReport {
    pub x_plus: f64,
    pub members: Vec<FamilyRow>,
    /// Smallest pairwise sup-distance between members on `(x₋(t), x₊(t))`.
    pub min_pairwise_sup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseOnRow {
    pub characteristics: f64,
    pub naive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOnReport {
    /// Branch value of the family member transported naively.
    pub a: f64,
    pub rows: Vec<NoiseOnRow>,
    pub median_characteristics: f64,
    pub median_naive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub noise_off: Option<NoiseOffReport>,
    pub noise_on: Option<NoiseOnReport>,
}

/// Without noise: evaluates the constant-branch family members `a ∈ members`
/// and their perturbative residuals. With noise (`paths` given): compares
/// the characteristics solution for `drift` with the family member
/// `members[0]` shifted rigidly by the noise, path by path.
pub fn uniqueness_gap_experiment(
    params: &GapParams,
    u0: &InitialDatum,
    members: &[f64],
    noisy: Option<(&DriftSpec, &[BrownianPath])>,
) -> Result<GapReport> {
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(invalid("gamma", "must lie in (0, 1)"));
    }
    if members.is_empty() {
        return Err(invalid("members", "need at least one family member"));
    }
    if params.n_s == 0 || params.n_x == 0 {
        return Err(invalid("n_s", "step counts must be positive"));
    }
    let holder = DriftSpec::holder(params.gamma, params.cap);
    let family: Vec<DeterministicFamily> = members
        .iter()
        .map(|&a| DeterministicFamily::constant(params.gamma, params.cap, u0.clone(), a, a))
        .collect::<Result<_>>()?;

    let quiet = BrownianPath::zero(1, params.t, params.t / params.n_s as f64)?;
    let rows = family
        .par_iter()
        .zip(members)
        .map(|(f, &a)| {
            Ok(FamilyRow {
                a,
                residual: perturbative_residual(
                    f,
                    &holder,
                    &params.theta,
                    &quiet,
                    params.t,
                    ResidualQuad::cells(params.n_x),
                )?
                .residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x_plus = holder_extremal_branch(params.gamma, params.cap, params.t);
    let probes: Vec<f64> = (1..512)
        .map(|i| -x_plus + 2.0 * x_plus * i as f64 / 512.0)
        .collect();
    let mut min_pairwise_sup = f64::INFINITY;
    for i in 0..family.len() {
        for j in i + 1..family.len() {
            let d = probes
                .iter()
                .map(|&x| (family[i].value(params.t, x) - family[j].value(params.t, x)).abs())
                .fold(0.0, f64::max);
            min_pairwise_sup = min_pairwise_sup.min(d);
        }
    }
    let noise_off = Some(NoiseOffReport {
        x_plus,
        members: rows,
        min_pairwise_sup,
    });

    let noise_on = match noisy {
        None => None,
        Some((drift, paths)) => {
            if paths.is_empty() {
                return Err(invalid("paths", "need at least one path"));
            }
            let grid = FlowGrid::line(
                -params.flow_half_width,
                params.flow_half_width,
                params.flow_points,
            )?;
            let rows = paths
                .iter()
                .map(|path| {
                    let chars = CharacteristicsSolution::new(drift, path, u0, &grid, params.t)?;
                    let characteristics = perturbative_residual(
                        &chars,
                        drift,
                        &params.theta,
                        path,
                        params.t,
                        ResidualQuad::cells(params.n_x),
                    )?
                    .residual;
                    let naive_field = NoiseShifted {
                        inner: &family[0],
                        path,
                    };
                    let naive = perturbative_residual(
                        &naive_field,
                        drift,
                        &params.theta,
                        path,
                        params.t,
                        ResidualQuad::cells(params.n_x),
                    )?
                    .residual;
                    Ok(NoiseOnRow {
                        characteristics,
                        naive,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let median_characteristics =
                median(&rows.iter().map(|r| r.characteristics).collect::<Vec<_>>());
            let median_naive = median(&rows.iter().map(|r| r.naive).collect::<Vec<_>>());
            Some(NoiseOnReport {
                a: members[0],
                rows,
                median_characteristics,
                median_naive,
            })
        }
    };
    Ok(GapReport {
        noise_off,
        noise_on,
    })
}
