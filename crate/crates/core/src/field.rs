//! Scalar fields on a uniform 1-D space grid times a uniform time grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::noise::fmt17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Homogeneous Neumann at both ends.
    Neumann,
    /// Values outside the grid are not defined.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    pub t_a: f64,
    pub t_b: f64,
    pub n_t: usize,
    pub boundary: BoundaryCondition,
}

/// Node values `u(t_k, x_i)` stored row-major by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub meta: GridMeta,
    values: Vec<f64>,
    /// Set by solvers when a truncation knob may contaminate the result.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SpaceTimeField {
    pub fn new(meta: GridMeta, values: Vec<f64>) -> Result<Self> {
        if meta.n_x == 0 || !(meta.x_hi > meta.x_lo) {
            return Err(invalid("space grid", "need n_x >= 1 and x_hi > x_lo"));
        }
        if meta.t_b < meta.t_a || (meta.n_t > 0 && meta.t_b == meta.t_a) {
            return Err(invalid("time grid", "need t_b > t_a (or a single slice)"));
        }
        if values.len() != (meta.n_x + 1) * (meta.n_t + 1) {
            return Err(invalid("values", "length does not match the grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("values", "field contains non-finite values"));
        }
        Ok(Self {
            meta,
            values,
            warning: None,
        })
    }

    /// Time-independent field from one slice of node values.
    pub fn stationary(x_lo: f64, x_hi: f64, values: Vec<f64>) -> Result<Self> {
        let n_x = values.len().saturating_sub(1);
        Self::new(
            GridMeta {
                x_lo,
                x_hi,
                n_x,
                t_a: 0.0,
                t_b: 0.0,
                n_t: 0,
                boundary: BoundaryCondition::None,
            },
            values,
        )
    }

    pub fn hx(&self) -> f64 {
        (self.meta.x_hi - self.meta.x_lo) / self.meta.n_x as f64
    }

    pub fn ht(&self) -> f64 {
        if self.meta.n_t == 0 {
            0.0
        } else {
            (self.meta.t_b - self.meta.t_a) / self.meta.n_t as f64
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.meta.n_x {
            self.meta.x_hi
        } else {
            self.meta.x_lo + i as f64 * self.hx()
        }
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.meta.n_t {
            self.meta.t_b
        } else {
            self.meta.t_a + k as f64 * self.ht()
        }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let w = self.meta.n_x + 1;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn time_weights(&self, t: f64) -> Result<(usize, usize, f64)> {
        let m = &self.meta;
        if m.n_t == 0 {
            return Ok((0, 0, 0.0));
        }
        let slack = 1e-12 * (m.t_b - m.t_a).max(1.0);
        if t < m.t_a - slack || t > m.t_b + slack {
            return Err(LabError::TimeOutOfRange {
                t,
                start: m.t_a,
                end: m.t_b,
            });
        }
        let pos = ((t - m.t_a) / self.ht()).clamp(0.0, m.n_t as f64);
        let k = (pos.floor() as usize).min(m.n_t - 1);
        Ok((k, k + 1, pos - k as f64))
    }

    fn space_weights(&self, x: f64) -> Result<(usize, f64)> {
        let m = &self.meta;
        let slack = 1e-12 * (m.x_hi - m.x_lo);
        if x < m.x_lo - slack || x > m.x_hi + slack {
            return Err(invalid(
                "x",
                format!("{x} outside field domain [{}, {}]", m.x_lo, m.x_hi),
            ));
        }
        let pos = ((x - m.x_lo) / self.hx()).clamp(0.0, m.n_x as f64);
        let i = (pos.floor() as usize).min(m.n_x - 1);
        Ok((i, pos - i as f64))
    }

    /// Bilinear interpolation.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64> {
        let (k0, k1, ft) = self.time_weights(t)?;
        let (i, fx) = self.space_weights(x)?;
        let at = |k: usize| {
            let s = self.slice(k);
            s[i] + fx * (s[i + 1] - s[i])
        };
        Ok(if ft == 0.0 {
            at(k0)
        } else {
            at(k0) + ft * (at(k1) - at(k0))
        })
    }

    /// Derivative in x of the piecewise-linear interpolant, linearly
    /// interpolated in time. Uses centered differences at nodes.
    pub fn interpolate_dx(&self, t: f64, x: f64) -> Result<f64> {
        let (k0, k1, ft) = self.time_weights(t)?;
        let (i, fx) = self.space_weights(x)?;
        let h = self.hx();
        let n = self.meta.n_x;
        let at = |k: usize| {
            let s = self.slice(k);
            let d = |j: usize| -> f64 {
                if j == 0 {
                    (s[1] - s[0]) / h
                } else if j == n {
                    (s[n] - s[n - 1]) / h
                } else {
                    (s[j + 1] - s[j - 1]) / (2.0 * h)
                }
            };
            d(i) + fx * (d(i + 1) - d(i))
        };
        Ok(if ft == 0.0 {
            at(k0)
        } else {
            at(k0) + ft * (at(k1) - at(k0))
        })
    }

    /// CSV with one row per x node and one column per time slice.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let cols: Vec<String> = (0..=self.meta.n_t)
            .map(|k| format!("t={}", fmt17(self.t(k))))
            .collect();
        writeln!(out, "x,{}", cols.join(","))?;
        for i in 0..=self.meta.n_x {
            let row: Vec<String> = (0..=self.meta.n_t)
                .map(|k| fmt17(self.slice(k)[i]))
                .collect();
            writeln!(out, "{},{}", fmt17(self.x(i)), row.join(","))?;
        }
        Ok(())
    }

    /// JSON sidecar with the grid metadata.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "grid": self.meta,
            "warning": self.warning,
        }))?)
    }
}
