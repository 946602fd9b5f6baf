//! Smooth compactly supported kernels.
//!
//! [`Bump`] is the normalized profile `c_d^{-1} exp(-1/(1-|z|^2))` on the unit
//! ball, rescaled to radius `eps` as `eps^{-d} bump(z/eps)`. It is used both for
//! mollifying drifts and for Wong–Zakai smoothing of paths.
//!
//! [`PolyBump`] is the C² test function `(1 - |x-c|²/r²)³`.

use crate::quad::gl_rule;

const NORMALIZATION_NODES: usize = 256;

/// `exp(-1/(1-s))` for `s < 1`, zero otherwise (s is the squared radius).
#[inline]
fn profile_sq(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s)).exp()
    }
}

/// d/ds of [`profile_sq`].
#[inline]
fn profile_sq_prime(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        let om = 1.0 - s;
        -(-1.0 / om).exp() / (om * om)
    }
}

/// Surface area of the unit sphere S^{d-1}.
fn sphere_area(dim: usize) -> f64 {
    use std::f64::consts::PI;
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => {
            // |S^{d-1}| = 2 pi^{d/2} / Gamma(d/2), via the recursion |S^{d+1}| = 2 pi/d |S^{d-1}|
            let mut area = if dim % 2 == 0 { 2.0 * PI } else { 4.0 * PI };
            let mut k = if dim % 2 == 0 { 2 } else { 3 };
            while k < dim {
                area *= 2.0 * PI / k as f64;
                k += 2;
            }
            area
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bump {
    dim: usize,
    inv_norm: f64,
}

impl Bump {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "kernel dimension must be >= 1");
        // radial integral of r^{d-1} exp(-1/(1-r^2)) over [0,1]
        let radial: f64 = gl_rule(NORMALIZATION_NODES)
            .iter()
            .map(|&(node, weight)| {
                let r = 0.5 * (node + 1.0);
                0.5 * weight * r.powi(dim as i32 - 1) * profile_sq(r * r)
            })
            .sum();
        let norm = if dim == 1 {
            2.0 * radial
        } else {
            sphere_area(dim) * radial
        };
        Self {
            dim,
            inv_norm: 1.0 / norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Value of the unit-radius normalized kernel at squared radius `s`.
    #[inline]
    fn unit_sq(&self, s: f64) -> f64 {
        self.inv_norm * profile_sq(s)
    }

    /// `theta_eps(z)` for a point `z` of the kernel's dimension.
    pub fn value(&self, z: &[f64], eps: f64) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        let s = z.iter().map(|zi| zi * zi).sum::<f64>() / (eps * eps);
        self.unit_sq(s) / eps.powi(self.dim as i32)
    }

    /// Gradient of `theta_eps` written into `out`.
    pub fn gradient(&self, z: &[f64], eps: f64, out: &mut [f64]) {
        let e2 = eps * eps;
        let s = z.iter().map(|zi| zi * zi).sum::<f64>() / e2;
        let factor = self.inv_norm * profile_sq_prime(s) * 2.0 / (e2 * eps.powi(self.dim as i32));
        for (o, zi) in out.iter_mut().zip(z) {
            *o = factor * zi;
        }
    }

    #[inline]
    pub fn value_1d(&self, z: f64, eps: f64) -> f64 {
        let u = z / eps;
        self.unit_sq(u * u) / eps
    }

    #[inline]
    pub fn derivative_1d(&self, z: f64, eps: f64) -> f64 {
        let u = z / eps;
        self.inv_norm * profile_sq_prime(u * u) * 2.0 * u / (eps * eps)
    }
}

/// Compactly supported C² test function `(1 - |x-c|²/r²)³` in one dimension.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolyBump {
    pub center: f64,
    pub radius: f64,
}

impl PolyBump {
    pub fn new(center: f64, radius: f64) -> Self {
        assert!(radius > 0.0, "test function radius must be positive");
        Self { center, radius }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.radius, self.center + self.radius)
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.radius;
        let q = 1.0 - u * u;
        if q <= 0.0 {
            0.0
        } else {
            q * q * q
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.radius;
        let q = 1.0 - u * u;
        if q <= 0.0 {
            0.0
        } else {
            -6.0 * u * q * q / self.radius
        }
    }

    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.radius;
        let q = 1.0 - u * u;
        if q <= 0.0 {
            0.0
        } else {
            (24.0 * u * u * q - 6.0 * q * q) / (self.radius * self.radius)
        }
    }

    /// Linear combination with another bump, for linearity checks.
    pub fn scaled(self, factor: f64) -> ScaledBump {
        ScaledBump {
            parts: vec![(factor, self)],
        }
    }
}

/// Finite linear combination of [`PolyBump`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBump {
    pub parts: Vec<(f64, PolyBump)>,
}

impl ScaledBump {
    pub fn plus(mut self, factor: f64, bump: PolyBump) -> Self {
        self.parts.push((factor, bump));
        self
    }
}

/// Test function interface used by the weak-form checkers.
pub trait TestFn: Sync {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
    fn second_derivative(&self, x: f64) -> f64;
    fn support(&self) -> (f64, f64);
}

impl TestFn for PolyBump {
    fn value(&self, x: f64) -> f64 {
        PolyBump::value(self, x)
    }
    fn derivative(&self, x: f64) -> f64 {
        PolyBump::derivative(self, x)
    }
    fn second_derivative(&self, x: f64) -> f64 {
        PolyBump::second_derivative(self, x)
    }
    fn support(&self) -> (f64, f64) {
        PolyBump::support(self)
    }
}

impl TestFn for ScaledBump {
    fn value(&self, x: f64) -> f64 {
        self.parts.iter().map(|(c, b)| c * b.value(x)).sum()
    }
    fn derivative(&self, x: f64) -> f64 {
        self.parts.iter().map(|(c, b)| c * b.derivative(x)).sum()
    }
    fn second_derivative(&self, x: f64) -> f64 {
        self.parts
            .iter()
            .map(|(c, b)| c * b.second_derivative(x))
            .sum()
    }
    fn support(&self) -> (f64, f64) {
        self.parts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, b)| {
                let (a, c) = b.support();
                (lo.min(a), hi.max(c))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        (0..n)
            .map(|i| {
                let x = a + (i as f64 + 0.5) * h;
                f(x) * h
            })
            .sum()
    }

    #[test]
    fn bump_has_unit_mass_in_one_dimension() {
        let k = Bump::new(1);
        for eps in [1.0, 0.3, 0.05] {
            let mass = integrate_1d(|z| k.value_1d(z, eps), -eps, eps, 20_000);
            assert!((mass - 1.0).abs() < 1e-9, "eps={eps}: {mass}");
        }
    }

    #[test]
    fn bump_has_unit_mass_in_two_dimensions() {
        let k = Bump::new(2);
        let eps = 0.5;
        let n = 800;
        let h = 2.0 * eps / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let z = [-eps + (i as f64 + 0.5) * h, -eps + (j as f64 + 0.5) * h];
                mass += k.value(&z, eps) * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn bump_is_even_and_supported_in_ball() {
        let k = Bump::new(1);
        for z in [0.1, 0.37, 0.99] {
            assert_eq!(k.value_1d(z, 1.0), k.value_1d(-z, 1.0));
        }
        assert_eq!(k.value_1d(1.0, 1.0), 0.0);
        assert_eq!(k.value_1d(1.5, 1.0), 0.0);
    }

    #[test]
    fn bump_derivative_matches_finite_difference() {
        let k = Bump::new(1);
        let eps = 0.2;
        for z in [-0.15, -0.05, 0.0, 0.08, 0.17] {
            let h = 1e-6;
            let fd = (k.value_1d(z + h, eps) - k.value_1d(z - h, eps)) / (2.0 * h);
            assert!((fd - k.derivative_1d(z, eps)).abs() < 1e-5 * (1.0 + fd.abs()));
        }
        let mut g = [0.0];
        k.gradient(&[0.08], eps, &mut g);
        assert!((g[0] - k.derivative_1d(0.08, eps)).abs() < 1e-12);
    }

    #[test]
    fn poly_bump_derivatives() {
        let b = PolyBump::new(0.3, 1.2);
        for x in [-0.5, 0.0, 0.31, 1.0] {
            let h = 1e-5;
            let d1 = (b.value(x + h) - b.value(x - h)) / (2.0 * h);
            let d2 = (b.value(x + h) - 2.0 * b.value(x) + b.value(x - h)) / (h * h);
            assert!((d1 - b.derivative(x)).abs() < 1e-8);
            assert!((d2 - b.second_derivative(x)).abs() < 1e-4);
        }
        assert_eq!(b.value(1.5), 0.0);
        assert_eq!(b.second_derivative(1.5), 0.0);
    }
}
