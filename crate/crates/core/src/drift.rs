//! Drift fields `b(t, x)`: catalogue, evaluation, divergence, mollification
//! and a sampled Hölder seminorm diagnostic.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::field::SpaceTimeField;
use crate::kernel::Bump;
use crate::noise::BrownianPath;

/// Three-point Gauss–Legendre rule on [-1, 1].
const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

fn bump(dim: usize) -> &'static Bump {
    static CACHE: [OnceLock<Bump>; 4] = [
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
    ];
    assert!((1..=4).contains(&dim), "mollification supports d <= 4");
    CACHE[dim - 1].get_or_init(|| Bump::new(dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Zero {
        dim: usize,
    },
    /// `(1/(1-γ)) sign(x) (|x| ∧ R)^γ` in 1-D; `signed = false` drops the sign.
    HolderPower {
        gamma: f64,
        cap: f64,
        #[serde(default = "yes")]
        signed: bool,
    },
    /// `ω (-x₂, x₁)`.
    #[serde(rename = "rotation2d")]
    Rotation2D {
        omega: f64,
    },
    /// `A x`, rows of `A` given in `matrix`.
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    /// `sqrt|x - W_t|` along an attached 1-D path.
    RandomShiftSqrt {
        path: Arc<BrownianPath>,
    },
    /// `ϑ_ε * base`, by composite Gauss–Legendre on a lattice of
    /// `quad_points` cells per kernel diameter.
    Mollified {
        base: Box<DriftSpec>,
        eps: f64,
        quad_points: usize,
    },
    /// 1-D field sampled on a space-time grid (bilinear interpolation).
    GridSampled {
        field: Arc<SpaceTimeField>,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Closed form where the variant has one, finite differences otherwise.
    Auto,
    /// Closed form only; errors where none exists.
    Analytic,
    /// Centered finite differences with the given step.
    Numerical,
}

impl DriftSpec {
    pub fn holder(gamma: f64, cap: f64) -> Self {
        DriftSpec::HolderPower {
            gamma,
            cap,
            signed: true,
        }
    }

    pub fn zero(dim: usize) -> Self {
        DriftSpec::Zero { dim }
    }

    /// `a * I` in dimension `dim`.
    pub fn scalar_linear(a: f64, dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { a } else { 0.0 }).collect())
            .collect();
        DriftSpec::Linear { matrix }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DriftSpec::Zero { dim } if *dim == 0 => Err(invalid("dim", "must be >= 1")),
            DriftSpec::HolderPower { gamma, cap, .. } => {
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return Err(invalid("gamma", format!("must lie in (0,1), got {gamma}")));
                }
                if !(*cap > 0.0) {
                    return Err(invalid("cap", format!("must be positive, got {cap}")));
                }
                Ok(())
            }
            DriftSpec::Linear { matrix } => {
                let n = matrix.len();
                if n == 0 || matrix.iter().any(|row| row.len() != n) {
                    return Err(invalid("matrix", "must be square and non-empty"));
                }
                Ok(())
            }
            DriftSpec::RandomShiftSqrt { path } if path.dim() != 1 => {
                Err(invalid("path", "random shift drift needs a 1-D path"))
            }
            DriftSpec::Mollified {
                base,
                eps,
                quad_points,
            } => {
                if !(*eps > 0.0) {
                    return Err(invalid("eps", format!("must be positive, got {eps}")));
                }
                if *quad_points < 8 {
                    return Err(invalid("quad_points", "must be >= 8"));
                }
                if base.dim() > 4 {
                    return Err(invalid("base", "mollification supports d <= 4"));
                }
                base.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DriftSpec::Zero { dim } => *dim,
            DriftSpec::HolderPower { .. }
            | DriftSpec::RandomShiftSqrt { .. }
            | DriftSpec::GridSampled { .. } => 1,
            DriftSpec::Rotation2D { .. } => 2,
            DriftSpec::Linear { matrix } => matrix.len(),
            DriftSpec::Mollified { base, .. } => base.dim(),
        }
    }

    /// Analytic sup-norm (infinite for unbounded fields).
    pub fn sup_norm(&self) -> f64 {
        match self {
            DriftSpec::Zero { .. } => 0.0,
            DriftSpec::HolderPower { gamma, cap, .. } => cap.powf(*gamma) / (1.0 - gamma),
            DriftSpec::Rotation2D { omega } if *omega == 0.0 => 0.0,
            DriftSpec::Linear { matrix } if matrix.iter().flatten().all(|a| *a == 0.0) => 0.0,
            DriftSpec::Rotation2D { .. }
            | DriftSpec::Linear { .. }
            | DriftSpec::RandomShiftSqrt { .. } => f64::INFINITY,
            DriftSpec::Mollified { base, .. } => base.sup_norm(),
            DriftSpec::GridSampled { field } => field.sup_abs(),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        match self {
            DriftSpec::RandomShiftSqrt { .. } => false,
            DriftSpec::GridSampled { field } => field.meta.n_t == 0,
            DriftSpec::Mollified { base, .. } => base.is_time_independent(),
            _ => true,
        }
    }

    /// Points where a 1-D drift fails to be smooth (for quadrature splitting).
    pub fn kinks_1d(&self) -> Vec<f64> {
        match self {
            DriftSpec::HolderPower { cap, .. } => vec![-cap, 0.0, *cap],
            _ => Vec::new(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(LabError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `b(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        match self {
            DriftSpec::Zero { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            DriftSpec::HolderPower { .. }
            | DriftSpec::RandomShiftSqrt { .. }
            | DriftSpec::GridSampled { .. } => out[0] = self.eval_1d(t, x[0])?,
            DriftSpec::Rotation2D { omega } => {
                out[0] = -omega * x[1];
                out[1] = omega * x[0];
            }
            DriftSpec::Linear { matrix } => {
                for (o, row) in out.iter_mut().zip(matrix) {
                    *o = row.iter().zip(x).map(|(a, xi)| a * xi).sum();
                }
            }
            DriftSpec::Mollified {
                base,
                eps,
                quad_points,
            } => {
                if base.dim() == 1 {
                    out[0] = mollified_1d(base, *eps, *quad_points, t, x[0], false)?;
                } else {
                    mollified_nd(base, *eps, *quad_points, t, x, out, false)?;
                }
            }
        }
        Ok(())
    }

    /// Scalar evaluation for 1-D drifts.
    pub fn eval_1d(&self, t: f64, x: f64) -> Result<f64> {
        Ok(match self {
            DriftSpec::Zero { dim: 1 } => 0.0,
            DriftSpec::HolderPower { gamma, cap, signed } => {
                let mag = x.abs().min(*cap).powf(*gamma) / (1.0 - gamma);
                if *signed {
                    if x > 0.0 {
                        mag
                    } else if x < 0.0 {
                        -mag
                    } else {
                        0.0
                    }
                } else {
                    mag
                }
            }
            DriftSpec::RandomShiftSqrt { path } => (x - path.evaluate_1d(t)?).abs().sqrt(),
            DriftSpec::GridSampled { field } => field.interpolate(t, x)?,
            DriftSpec::Linear { matrix } if matrix.len() == 1 => matrix[0][0] * x,
            DriftSpec::Mollified {
                base,
                eps,
                quad_points,
            } if base.dim() == 1 => mollified_1d(base, *eps, *quad_points, t, x, false)?,
            other => {
                return Err(LabError::DimensionMismatch {
                    expected: other.dim(),
                    got: 1,
                })
            }
        })
    }

    /// `div b(t, x)`. `h` is the finite-difference step (must be positive).
    pub fn divergence(&self, t: f64, x: &[f64], h: f64, mode: DivergenceMode) -> Result<f64> {
        if !(h > 0.0) {
            return Err(invalid(
                "h",
                format!("finite-difference step must be positive, got {h}"),
            ));
        }
        self.check_dim(x)?;
        if mode != DivergenceMode::Numerical {
            if let Some(v) = self.analytic_divergence(t, x)? {
                return Ok(v);
            }
            if mode == DivergenceMode::Analytic {
                return Err(match self {
                    DriftSpec::HolderPower { .. } | DriftSpec::RandomShiftSqrt { .. } => {
                        LabError::SingularDivergence { x: x[0] }
                    }
                    _ => invalid("mode", "variant has no closed-form divergence"),
                });
            }
        }
        let d = self.dim();
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        let mut div = 0.0;
        for i in 0..d {
            xp[i] = x[i] + h;
            self.eval_into(t, &xp, &mut plus)?;
            xp[i] = x[i] - h;
            self.eval_into(t, &xp, &mut minus)?;
            xp[i] = x[i];
            div += (plus[i] - minus[i]) / (2.0 * h);
        }
        Ok(div)
    }

    /// 1-D divergence, closed form when available else centered differences.
    pub fn divergence_1d(&self, t: f64, x: f64, h: f64) -> Result<f64> {
        self.divergence(t, &[x], h, DivergenceMode::Auto)
    }

    fn analytic_divergence(&self, t: f64, x: &[f64]) -> Result<Option<f64>> {
        Ok(match self {
            DriftSpec::Zero { .. } | DriftSpec::Rotation2D { .. } => Some(0.0),
            DriftSpec::Linear { matrix } => Some((0..matrix.len()).map(|i| matrix[i][i]).sum()),
            DriftSpec::HolderPower { gamma, cap, signed } => {
                let a = x[0].abs();
                if a == 0.0 || a == *cap {
                    None
                } else if a > *cap {
                    Some(0.0)
                } else {
                    let v = gamma / (1.0 - gamma) * a.powf(gamma - 1.0);
                    Some(if *signed { v } else { v * x[0].signum() })
                }
            }
            DriftSpec::RandomShiftSqrt { path } => {
                let r = x[0] - path.evaluate_1d(t)?;
                (r != 0.0).then(|| r.signum() / (2.0 * r.abs().sqrt()))
            }
            DriftSpec::Mollified {
                base,
                eps,
                quad_points,
            } => Some(if base.dim() == 1 {
                mollified_1d(base, *eps, *quad_points, t, x[0], true)?
            } else {
                let mut out = [0.0];
                mollified_nd(base, *eps, *quad_points, t, x, &mut out, true)?;
                out[0]
            }),
            DriftSpec::GridSampled { .. } => None,
        })
    }
}

/// Lattice cells `[k h, (k+1) h]` meeting `(x - eps, x + eps)`.
#[inline]
fn lattice_range(x: f64, eps: f64, h: f64) -> (i64, i64) {
    (
        ((x - eps) / h).floor() as i64,
        ((x + eps) / h).ceil() as i64,
    )
}

/// `(ϑ_ε * b)(x)` or, with `derivative`, `(ϑ_ε' * b)(x)`.
///
/// Nodes sit on a fixed lattice in absolute coordinates, so the result is a
/// finite sum of smooth bumps and is smooth in `x`.
fn mollified_1d(
    base: &DriftSpec,
    eps: f64,
    cells: usize,
    t: f64,
    x: f64,
    derivative: bool,
) -> Result<f64> {
    let k = bump(1);
    let h = 2.0 * eps / cells as f64;
    let (k0, k1) = lattice_range(x, eps, h);
    let mut acc = 0.0;
    for c in k0..k1 {
        let mid = (c as f64 + 0.5) * h;
        for &(node, w) in &GL3 {
            let y = mid + 0.5 * h * node;
            let z = x - y;
            if z.abs() >= eps {
                continue;
            }
            let kern = if derivative {
                k.derivative_1d(z, eps)
            } else {
                k.value_1d(z, eps)
            };
            acc += 0.5 * h * w * kern * base.eval_1d(t, y)?;
        }
    }
    Ok(acc)
}

/// Tensor-product version of [`mollified_1d`]. With `derivative`, `out[0]`
/// receives the divergence.
fn mollified_nd(
    base: &DriftSpec,
    eps: f64,
    cells: usize,
    t: f64,
    x: &[f64],
    out: &mut [f64],
    derivative: bool,
) -> Result<()> {
    let d = x.len();
    let k = bump(d);
    let h = 2.0 * eps / cells as f64;
    let ranges: Vec<(i64, i64)> = x.iter().map(|&xi| lattice_range(xi, eps, h)).collect();
    let per_axis: Vec<usize> = ranges
        .iter()
        .map(|(a, b)| (b - a) as usize * GL3.len())
        .collect();
    let total: usize = per_axis.iter().product();
    let mut y = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut bval = vec![0.0; d];
    let mut grad = vec![0.0; d];
    out.iter_mut().for_each(|o| *o = 0.0);
    for flat in 0..total {
        let mut rem = flat;
        let mut weight = 1.0;
        let mut r2 = 0.0;
        for axis in 0..d {
            let idx = rem % per_axis[axis];
            rem /= per_axis[axis];
            let (cell, node) = (idx / GL3.len(), idx % GL3.len());
            let mid = (ranges[axis].0 + cell as i64) as f64 * h + 0.5 * h;
            y[axis] = mid + 0.5 * h * GL3[node].0;
            weight *= 0.5 * h * GL3[node].1;
            z[axis] = x[axis] - y[axis];
            r2 += z[axis] * z[axis];
        }
        if r2 >= eps * eps {
            continue;
        }
        base.eval_into(t, &y, &mut bval)?;
        if derivative {
            k.gradient(&z, eps, &mut grad);
            out[0] += weight * grad.iter().zip(&bval).map(|(g, b)| g * b).sum::<f64>();
        } else {
            let kv = weight * k.value(&z, eps);
            for i in 0..d {
                out[i] += kv * bval[i];
            }
        }
    }
    Ok(())
}

/// `b^ε = ϑ_ε * b` with fixed-node quadrature.
pub fn mollify_drift(spec: &DriftSpec, eps: f64, quad_points: usize) -> Result<DriftSpec> {
    let m = DriftSpec::Mollified {
        base: Box::new(spec.clone()),
        eps,
        quad_points,
    };
    m.validate()?;
    Ok(m)
}

/// Sampled estimate of `[b(t,·)]_α` on the ball `B(r)`.
///
/// Pair `i` is drawn from the seeded stream: uniform pairs, reflected pairs
/// `(x, -x)` and close pairs `(x, x + ξ)` with `|ξ|` log-uniform in
/// `[1e-6 r, r]`, cycling in that order. Coincident pairs are skipped.
pub fn holder_seminorm_estimate(
    spec: &DriftSpec,
    t: f64,
    r: f64,
    alpha: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(invalid("n_pairs", "must be >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", format!("must lie in (0,1), got {alpha}")));
    }
    if !(r > 0.0) {
        return Err(invalid("r", "radius must be positive"));
    }
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_ball = |rng: &mut ChaCha8Rng| loop {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-r..=r)).collect();
        if p.iter().map(|v| v * v).sum::<f64>() <= r * r {
            return p;
        }
    };
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut best = 0.0f64;
    for i in 0..n_pairs {
        let x = in_ball(&mut rng);
        let y: Vec<f64> = match i % 3 {
            0 => in_ball(&mut rng),
            1 => x.iter().map(|v| -v).collect(),
            _ => {
                let scale = r * 10f64.powf(-6.0 * rng.random::<f64>());
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                x.iter()
                    .zip(&dir)
                    .map(|(xi, di)| xi + scale * di / norm)
                    .collect()
            }
        };
        let dist = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        spec.eval_into(t, &x, &mut bx)?;
        spec.eval_into(t, &y, &mut by)?;
        let diff = bx
            .iter()
            .zip(&by)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = best.max(diff / dist.powf(alpha));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn holder_power_closed_form() {
        let b = DriftSpec::holder(0.5, 2.0);
        assert!(close(b.eval_1d(0.0, 1.0).unwrap(), 2.0, 1e-15));
        assert!(close(
            b.eval_1d(0.0, -9.0).unwrap(),
            -2.0 * 2f64.sqrt(),
            1e-12
        ));
        assert_eq!(b.eval_1d(0.0, 0.0).unwrap(), 0.0);
        let unsigned = DriftSpec::HolderPower {
            gamma: 0.5,
            cap: 2.0,
            signed: false,
        };
        assert!(close(unsigned.eval_1d(0.0, -1.0).unwrap(), 2.0, 1e-15));
    }

    #[test]
    fn zero_and_dimension_checks() {
        let z = DriftSpec::zero(3);
        assert_eq!(z.eval(0.3, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            z.eval(0.0, &[1.0]),
            Err(LabError::DimensionMismatch {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn closed_form_divergences() {
        let rot = DriftSpec::Rotation2D { omega: 1.0 };
        assert_eq!(
            rot.divergence(0.0, &[0.3, -2.0], 1e-3, DivergenceMode::Auto)
                .unwrap(),
            0.0
        );
        let b = DriftSpec::holder(0.5, 2.0);
        assert!(close(b.divergence_1d(0.0, 1.0, 1e-3).unwrap(), 1.0, 1e-15));
        let lin = DriftSpec::Linear {
            matrix: vec![vec![1.0, 2.0], vec![0.0, 3.0]],
        };
        assert_eq!(
            lin.divergence(0.0, &[5.0, 1.0], 1e-3, DivergenceMode::Analytic)
                .unwrap(),
            4.0
        );
    }

    #[test]
    fn divergence_errors() {
        let b = DriftSpec::holder(0.5, 2.0);
        assert!(matches!(
            b.divergence(0.0, &[0.0], 1e-3, DivergenceMode::Analytic),
            Err(LabError::SingularDivergence { .. })
        ));
        assert!(b
            .divergence(0.0, &[0.0], 1e-3, DivergenceMode::Auto)
            .unwrap()
            .is_finite());
        assert!(b
            .divergence(0.0, &[1.0], 0.0, DivergenceMode::Auto)
            .is_err());
        assert!(b
            .divergence(0.0, &[1.0], -1.0, DivergenceMode::Auto)
            .is_err());
    }

    #[test]
    fn numerical_divergence_matches_closed_form() {
        let b = DriftSpec::holder(0.7, 2.0);
        let fd = b
            .divergence(0.0, &[0.8], 1e-5, DivergenceMode::Numerical)
            .unwrap();
        let exact = b
            .divergence(0.0, &[0.8], 1e-5, DivergenceMode::Analytic)
            .unwrap();
        assert!(close(fd, exact, 1e-7));
    }

    #[test]
    fn mollified_examples() {
        let z = mollify_drift(&DriftSpec::zero(1), 0.1, 16).unwrap();
        assert_eq!(z.eval_1d(0.0, 0.37).unwrap(), 0.0);
        let lin = mollify_drift(&DriftSpec::scalar_linear(1.7, 1), 0.1, 16).unwrap();
        for x in [-1.3, 0.0, 0.2, 2.9] {
            assert!(close(
                lin.eval_1d(0.0, x).unwrap(),
                1.7 * x,
                1e-5 * (1.0 + x.abs())
            ));
        }
        let hp = mollify_drift(&DriftSpec::holder(0.5, 2.0), 0.05, 16).unwrap();
        assert!(hp.eval_1d(0.0, 0.0).unwrap().abs() < 1e-14);
    }

    #[test]
    fn mollification_rejects_bad_parameters() {
        assert!(mollify_drift(&DriftSpec::zero(1), 0.0, 16).is_err());
        assert!(mollify_drift(&DriftSpec::zero(1), 0.1, 4).is_err());
    }

    #[test]
    fn mollified_divergence_matches_finite_difference() {
        let hp = mollify_drift(&DriftSpec::holder(0.5, 2.0), 0.05, 16).unwrap();
        for x in [-0.3, -0.02, 0.0, 0.011, 0.4, 1.99] {
            let an = hp
                .divergence(0.0, &[x], 1e-6, DivergenceMode::Analytic)
                .unwrap();
            let fd = hp
                .divergence(0.0, &[x], 1e-6, DivergenceMode::Numerical)
                .unwrap();
            assert!(
                close(an, fd, 1e-5 * (1.0 + an.abs())),
                "x={x}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn mollified_rotation_is_divergence_free() {
        let rot = mollify_drift(&DriftSpec::Rotation2D { omega: 1.3 }, 0.1, 16).unwrap();
        for p in [[0.0, 0.0], [0.5, -0.25], [-1.0, 2.0]] {
            let div = rot
                .divergence(0.0, &p, 1e-3, DivergenceMode::Analytic)
                .unwrap();
            assert!(div.abs() < 1e-8, "{div}");
            let v = rot.eval(0.0, &p).unwrap();
            let tol = 1e-5 * (1.0 + p[0].abs() + p[1].abs());
            assert!(
                close(v[0], -1.3 * p[1], tol) && close(v[1], 1.3 * p[0], tol),
                "{v:?} at {p:?}"
            );
        }
    }

    #[test]
    fn mollification_converges_monotonically() {
        let b = DriftSpec::holder(0.5, 2.0);
        let xs: Vec<f64> = (0..1000).map(|i| -3.0 + 6.0 * i as f64 / 999.0).collect();
        let mut prev = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05, 0.025] {
            let m = mollify_drift(&b, eps, 16).unwrap();
            let err = xs
                .iter()
                .map(|&x| (m.eval_1d(0.0, x).unwrap() - b.eval_1d(0.0, x).unwrap()).abs())
                .fold(0.0f64, f64::max);
            assert!(err < prev, "eps={eps}: {err} vs {prev}");
            prev = err;
        }
    }

    /// Exact sup of the seminorm by dense grid search on pairs.
    fn grid_seminorm(b: &DriftSpec, r: f64, alpha: f64, n: usize) -> f64 {
        let xs: Vec<f64> = (0..=n)
            .map(|i| -r + 2.0 * r * i as f64 / n as f64)
            .collect();
        let vals: Vec<f64> = xs.iter().map(|&x| b.eval_1d(0.0, x).unwrap()).collect();
        let mut best = 0.0f64;
        for i in 0..=n {
            for j in 0..i {
                best = best.max((vals[i] - vals[j]).abs() / (xs[i] - xs[j]).abs().powf(alpha));
            }
        }
        best
    }

    #[test]
    fn seminorm_oracle_values() {
        let b = DriftSpec::holder(0.5, 2.0);
        // brute force over a 2001-point grid: the sup sits on reflected pairs, 2 sqrt 2
        let brute = grid_seminorm(&b, 1.0, 0.5, 2000);
        assert!(close(brute, 2.0 * 2f64.sqrt(), 1e-9), "{brute}");
        let est = holder_seminorm_estimate(&b, 0.0, 1.0, 0.5, 3000, 42).unwrap();
        assert!(est >= 2.0 * 2f64.sqrt() - 1e-12 && est <= 4.0, "{est}");

        let id = DriftSpec::scalar_linear(1.0, 1);
        let brute = grid_seminorm(&id, 1.0, 0.5, 2000);
        assert!(close(brute, 2f64.sqrt(), 1e-12));
        let est = holder_seminorm_estimate(&id, 0.0, 1.0, 0.5, 3000, 42).unwrap();
        assert!(
            est <= 2f64.sqrt() + 1e-12 && est > 0.95 * 2f64.sqrt(),
            "{est}"
        );

        assert_eq!(
            holder_seminorm_estimate(&DriftSpec::zero(1), 0.0, 1.0, 0.5, 100, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn seminorm_is_monotone_in_pair_count() {
        let b = mollify_drift(&DriftSpec::holder(0.3, 1.0), 0.1, 8).unwrap();
        let mut prev = 0.0;
        for n in [1, 5, 20, 100, 400] {
            let v = holder_seminorm_estimate(&b, 0.0, 1.0, 0.4, n, 7).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(holder_seminorm_estimate(&b, 0.0, 1.0, 0.4, 0, 7).is_err());
    }

    #[test]
    fn random_shift_sqrt_follows_the_path() {
        let path = Arc::new(BrownianPath::linear(1.0, 0.25, 2.0).unwrap());
        let b = DriftSpec::RandomShiftSqrt { path };
        assert!(close(b.eval_1d(0.5, 1.0 + 4.0).unwrap(), 2.0, 1e-15));
        assert!(b.eval_1d(1.5, 0.0).is_err());
    }

    #[test]
    fn json_shape() {
        let b = mollify_drift(&DriftSpec::holder(0.5, 2.0), 0.05, 16).unwrap();
        let json = serde_json::to_value(&b).unwrap();
        assert_eq!(json["kind"], "mollified");
        assert_eq!(json["base"]["kind"], "holder_power");
        let back: DriftSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, b);
        let parsed: DriftSpec =
            serde_json::from_str(r#"{"kind":"holder_power","gamma":0.5,"cap":2}"#).unwrap();
        assert_eq!(parsed, DriftSpec::holder(0.5, 2.0));
        let rot: DriftSpec = serde_json::from_str(r#"{"kind":"rotation2d","omega":1}"#).unwrap();
        assert_eq!(rot.dim(), 2);
    }

    #[test]
    fn evaluation_is_pure() {
        let b = mollify_drift(&DriftSpec::holder(0.6, 2.0), 0.05, 16).unwrap();
        let first: Vec<u64> = (0..50)
            .map(|i| b.eval_1d(0.0, i as f64 * 0.01).unwrap().to_bits())
            .collect();
        let threads: Vec<Vec<u64>> = std::thread::scope(|s| {
            (0..4)
                .map(|_| {
                    s.spawn(|| {
                        (0..50)
                            .map(|i| b.eval_1d(0.0, i as f64 * 0.01).unwrap().to_bits())
                            .collect()
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect()
        });
        for t in threads {
            assert_eq!(t, first);
        }
    }
}
