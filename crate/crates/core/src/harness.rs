//! Named experiments, their configuration, and persisted reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::drift::{mollify_drift, DriftSpec};
use crate::error::{LabError, Result};
use crate::flow::{
    flow_endpoint, forward_flow, forward_flow_with, holder_extremal_branch, integrate_sde,
    inverse_flow_backward, jacobian_fd, jacobian_record_1d, median_separation,
    pathwise_uniqueness_probe, random_drift_negative_probe, sobolev_jacobian_probe,
    wong_zakai_flow, FlowGrid, Scheme,
};
use crate::kernel::PolyBump;
use crate::noise::{fmt17, sample_brownian, wong_zakai_smooth, BrownianPath};
use crate::parabolic::{
    build_zvonkin_transform, grad_decay_study, ito_tanaka_batch, solve_mean_pde,
    solve_mean_pde_signed, DiffusionSign, ParabolicGrid, Source,
};
use crate::stats::median;
use crate::transport::{
    commutator_along_flow, commutator_ladder, uniqueness_gap_experiment, CommutatorQuad, GapParams,
    InitialDatum, ShiftedDatum,
};

fn config_error(field: impl Into<String>, reason: impl Into<String>) -> LabError {
    LabError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Optional grid overrides; each experiment supplies its own defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Half-width `L` of the spatial domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_x: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

/// Run configuration. Only `experiment` and `seed` are required; every other
/// field overrides the experiment's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    /// Number of paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            drift: None,
            grid: GridConfig::default(),
            ensemble: None,
            eps: None,
            lambdas: None,
            gammas: None,
            ns: None,
            deltas: None,
            output_dir: None,
        }
    }

    /// Parses a JSON document, applies `key=value` overrides (dotted keys
    /// address nested fields; values are JSON, or bare strings), and
    /// validates the result.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| config_error("<document>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| config_error("<document>", "expected a JSON object"))?;
        for key in ["experiment", "seed"] {
            if !obj.contains_key(key) {
                return Err(config_error(key, "required"));
            }
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            config_error(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !REGISTRY.iter().any(|e| e.info.id == self.experiment) {
            return Err(LabError::UnknownExperiment(self.experiment.clone()));
        }
        let ladders: [(&str, Option<Vec<f64>>); 5] = [
            ("eps", self.eps.clone()),
            ("lambdas", self.lambdas.clone()),
            ("gammas", self.gammas.clone()),
            ("deltas", self.deltas.clone()),
            (
                "ns",
                self.ns
                    .as_ref()
                    .map(|v| v.iter().map(|&n| n as f64).collect()),
            ),
        ];
        for (name, ladder) in ladders {
            let Some(l) = ladder else { continue };
            if l.is_empty() {
                return Err(config_error(name, "ladder is empty"));
            }
            if l.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(config_error(name, "entries must be positive"));
            }
            let up = l.windows(2).all(|w| w[1] > w[0]);
            let down = l.windows(2).all(|w| w[1] < w[0]);
            if !(up || down) {
                return Err(config_error(name, "entries must be strictly sorted"));
            }
        }
        if self.ensemble == Some(0) {
            return Err(config_error("ensemble", "must be at least 1"));
        }
        let g = &self.grid;
        for (name, v) in [
            ("grid.half_width", g.half_width),
            ("grid.dt", g.dt),
            ("grid.t_end", g.t_end),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(config_error(name, "must be positive"));
                }
            }
        }
        if g.n_x == Some(0) {
            return Err(config_error("grid.n_x", "must be positive"));
        }
        if let (Some(dt), Some(t)) = (g.dt, g.t_end) {
            if dt > t {
                return Err(config_error("grid.dt", "exceeds grid.t_end"));
            }
        }
        if let Some(d) = &self.drift {
            d.validate()
                .map_err(|e| config_error("drift", e.to_string()))?;
        }
        Ok(())
    }

    fn t_end(&self, default: f64) -> f64 {
        self.grid.t_end.unwrap_or(default)
    }
    fn dt(&self, default: f64) -> f64 {
        self.grid.dt.unwrap_or(default)
    }
    fn n_x(&self, default: usize) -> usize {
        self.grid.n_x.unwrap_or(default)
    }
    fn half_width(&self, default: f64) -> f64 {
        self.grid.half_width.unwrap_or(default)
    }
    fn ensemble(&self, default: usize) -> usize {
        self.ensemble.unwrap_or(default)
    }
    fn gamma(&self, default: f64) -> f64 {
        self.gammas.as_ref().map_or(default, |g| g[0])
    }
    fn eps(&self, default: &[f64]) -> Vec<f64> {
        self.eps.clone().unwrap_or_else(|| default.to_vec())
    }
    fn drift(&self, default: impl FnOnce() -> Result<DriftSpec>) -> Result<DriftSpec> {
        match &self.drift {
            Some(d) => Ok(d.clone()),
            None => default(),
        }
    }
}

fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_error(key, "parent is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(config_error(key, "empty key"))
}

/// How a row's measurement is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `|measured - expected| <= tolerance`.
    Within,
    /// `measured <= expected + tolerance`.
    AtMost,
    /// `measured >= expected - tolerance`.
    AtLeast,
    /// `measured > expected`.
    Above,
    /// Reported only; always passes.
    Info,
}

impl Check {
    pub fn passes(self, measured: f64, expected: f64, tolerance: f64) -> bool {
        match self {
            Check::Within => (measured - expected).abs() <= tolerance,
            Check::AtMost => measured <= expected + tolerance,
            Check::AtLeast => measured >= expected - tolerance,
            Check::Above => measured > expected,
            Check::Info => true,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Check::Within => "within",
            Check::AtMost => "at_most",
            Check::AtLeast => "at_least",
            Check::Above => "above",
            Check::Info => "info",
        }
    }
}

// serde_json writes non-finite floats as null
fn nullable_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn nullable_points<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<(f64, f64)>, D::Error> {
    let raw: Vec<(Option<f64>, Option<f64>)> = Vec::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|(x, y)| (x.unwrap_or(f64::NAN), y.unwrap_or(f64::NAN)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// `key=value` pairs separated by `;`.
    pub params: String,
    #[serde(deserialize_with = "nullable_f64")]
    pub measured: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub expected: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub tolerance: f64,
    pub check: Check,
    pub pass: bool,
}

impl ReportRow {
    pub fn new(
        name: &str,
        params: impl Into<String>,
        measured: f64,
        expected: f64,
        tolerance: f64,
        check: Check,
    ) -> Self {
        Self {
            name: name.to_string(),
            params: params.into(),
            measured,
            expected,
            tolerance,
            check,
            pass: check.passes(measured, expected, tolerance),
        }
    }
}

/// Two-column data for external plotting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub x: String,
    pub y: String,
    #[serde(deserialize_with = "nullable_points")]
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub criterion: Option<u8>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub series: BTreeMap<String, Series>,
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    /// True when there is at least one row and every row passes.
    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "experiment,name,params,measured,expected,tolerance,check,pass"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.experiment,
                r.name,
                r.params,
                fmt17(r.measured),
                fmt17(r.expected),
                fmt17(r.tolerance),
                r.check.label(),
                r.pass
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes one series as a two-column CSV. An empty report yields the header
/// only.
pub fn emit_plot_data(report: &ExperimentReport, series: &str, mut out: impl Write) -> Result<()> {
    if report.rows.is_empty() && report.series.is_empty() {
        writeln!(out, "x,y")?;
        return Ok(());
    }
    let s = report
        .series
        .get(series)
        .ok_or_else(|| LabError::UnknownSeries(series.to_string()))?;
    writeln!(out, "{},{}", s.x, s.y)?;
    for (x, y) in &s.points {
        writeln!(out, "{},{}", fmt17(*x), fmt17(*y))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExperimentInfo {
    pub id: &'static str,
    pub description: &'static str,
    /// Acceptance criterion the experiment implements.
    pub criterion: Option<u8>,
}

#[derive(Default)]
struct Recorder {
    rows: Vec<ReportRow>,
    series: BTreeMap<String, Series>,
}

impl Recorder {
    fn row(
        &mut self,
        name: &str,
        params: impl Into<String>,
        measured: f64,
        expected: f64,
        tolerance: f64,
        check: Check,
    ) {
        self.rows.push(ReportRow::new(
            name, params, measured, expected, tolerance, check,
        ));
    }

    fn flag(&mut self, name: &str, params: impl Into<String>, ok: bool) {
        self.row(
            name,
            params,
            f64::from(u8::from(ok)),
            1.0,
            0.0,
            Check::Within,
        );
    }

    fn series(&mut self, name: &str, x: &str, y: &str, points: Vec<(f64, f64)>) {
        self.series.insert(
            name.to_string(),
            Series {
                x: x.to_string(),
                y: y.to_string(),
                points,
            },
        );
    }
}

type Runner = fn(&ExperimentConfig, &mut Recorder) -> Result<()>;

struct Entry {
    info: ExperimentInfo,
    run: Runner,
}

const fn entry(
    id: &'static str,
    description: &'static str,
    criterion: Option<u8>,
    run: Runner,
) -> Entry {
    Entry {
        info: ExperimentInfo {
            id,
            description,
            criterion,
        },
        run,
    }
}

const REGISTRY: &[Entry] = &[
    entry(
        "zero-drift-sanity",
        "zero drift: flow is translation by W and Jacobian is 1",
        Some(1),
        zero_drift_sanity,
    ),
    entry(
        "det-nonuniqueness",
        "three constant-branch solutions of the noiseless equation",
        Some(2),
        det_nonuniqueness,
    ),
    entry(
        "stoch-uniqueness",
        "trajectory separation with and without noise at a Hölder point",
        Some(3),
        stoch_uniqueness,
    ),
    entry(
        "mean-pde-mc",
        "Monte Carlo mean of the characteristics solution vs the mean equation",
        Some(4),
        mean_pde_mc,
    ),
    entry(
        "ito-tanaka",
        "Itô-Tanaka identity for f = div b along SDE paths",
        Some(5),
        ito_tanaka,
    ),
    entry(
        "grad-decay",
        "decay of sup|Dψ_λ| of the resolvent solution in λ",
        Some(6),
        grad_decay,
    ),
    entry(
        "zvonkin-equivalence",
        "direct Euler vs transformed conjugated SDE",
        Some(7),
        zvonkin_equivalence,
    ),
    entry(
        "measure-preservation",
        "Jacobian of a planar rotation flow",
        Some(8),
        measure_preservation,
    ),
    entry(
        "jacobian-routes",
        "finite-difference Jacobian vs exp of integrated divergence",
        Some(9),
        jacobian_routes,
    ),
    entry(
        "commutator-decay",
        "commutator decay in ε, plain and along the flow",
        Some(10),
        commutator_decay,
    ),
    entry(
        "wong-zakai",
        "smoothed-noise flows approach the SDE flow",
        Some(11),
        wong_zakai,
    ),
    entry(
        "negative-example",
        "two solutions of an SDE with path-dependent drift",
        Some(12),
        negative_example,
    ),
    entry(
        "sobolev-jacobian",
        "Sobolev energy of log J across roughness and ε",
        Some(13),
        sobolev_jacobian,
    ),
    entry(
        "uniqueness-gap",
        "noisy characteristics solution vs a naively shifted family member",
        None,
        uniqueness_gap,
    ),
];

pub fn list_experiments() -> Vec<ExperimentInfo> {
    REGISTRY.iter().map(|e| e.info).collect()
}

/// Runs the experiment named in `config`. With `output_dir` set, writes
/// `<id>.csv` and `<id>.json` there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let entry = REGISTRY
        .iter()
        .find(|e| e.info.id == config.experiment)
        .ok_or_else(|| LabError::UnknownExperiment(config.experiment.clone()))?;
    let start = Instant::now();
    let mut rec = Recorder::default();
    (entry.run)(config, &mut rec)?;
    let mut report = ExperimentReport {
        experiment: config.experiment.clone(),
        criterion: entry.info.criterion,
        rows: rec.rows,
        series: rec.series,
        config: config.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
    };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", config.experiment));
        let json = dir.join(format!("{}.json", config.experiment));
        report.artifacts = vec![csv.display().to_string(), json.display().to_string()];
        report.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
        std::fs::write(&json, report.summary_json()?)?;
    }
    Ok(report)
}

fn paths(
    cfg: &ExperimentConfig,
    count: usize,
    dim: usize,
    t_end: f64,
    dt: f64,
) -> Result<Vec<BrownianPath>> {
    (0..count)
        .into_par_iter()
        .map(|i| sample_brownian(cfg.seed, i as u64, dim, t_end, dt))
        .collect()
}

fn mollified_holder(gamma: f64, eps: f64) -> Result<DriftSpec> {
    mollify_drift(&DriftSpec::holder(gamma, 2.0), eps, 16)
}

fn zero_drift_sanity(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let t_end = cfg.t_end(1.0);
    let dt = cfg.dt(t_end / 256.0);
    let n = cfg.n_x(128);
    let l = cfg.half_width(2.0);
    let path = sample_brownian(cfg.seed, 0, 1, t_end, dt)?;
    let grid = FlowGrid::line(-l, l, n)?;
    let times: Vec<f64> = (0..=path.n_steps()).map(|k| path.time(k)).collect();
    let ens = forward_flow(&DriftSpec::zero(1), &path, &grid, 0.0, &times)?;
    let mut worst_translation = 0.0f64;
    let mut worst_jacobian = 0.0f64;
    let mut per_time = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let w = path.grid_value(k)[0];
        let mut worst = 0.0f64;
        for p in 0..n {
            worst = worst.max((ens.state(k, p)[0] - grid.point(p)[0] - w).abs());
        }
        for p in 1..n - 1 {
            worst_jacobian = worst_jacobian.max((jacobian_fd(&ens, p, t)? - 1.0).abs());
        }
        worst_translation = worst_translation.max(worst);
        per_time.push((t, worst));
    }
    let params = format!("n_points={n};n_steps={};dt={}", path.n_steps(), fmt17(dt));
    rec.row(
        "translation_error",
        params.clone(),
        worst_translation,
        1e-12,
        0.0,
        Check::AtMost,
    );
    rec.row(
        "jacobian_error",
        params,
        worst_jacobian,
        1e-10,
        0.0,
        Check::AtMost,
    );
    rec.series("time-vs-translation-error", "t", "max_error", per_time);
    Ok(())
}

fn det_nonuniqueness(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let t = cfg.t_end(1.0);
    let n_x = cfg.n_x(512);
    let n_s = (t / cfg.dt(t / 512.0)).round() as usize;
    let params = GapParams {
        gamma,
        cap: 2.0,
        t,
        theta: PolyBump::new(0.3, 1.5),
        n_x,
        n_s,
        flow_points: 801,
        flow_half_width: 4.0,
    };
    let members = [0.0, 0.5, 1.0];
    let report = uniqueness_gap_experiment(
        &params,
        &InitialDatum::Step { threshold: 0.0 },
        &members,
        None,
    )?;
    let off = report
        .noise_off
        .ok_or_else(|| config_error("experiment", "noise-off report missing"))?;
    let p = format!("gamma={gamma};t={t};n_x={n_x};n_s={n_s}");
    rec.row(
        "x_plus",
        p.clone(),
        off.x_plus,
        t.powf(1.0 / (1.0 - gamma)),
        1e-12,
        Check::Within,
    );
    rec.row(
        "min_pairwise_sup",
        p.clone(),
        off.min_pairwise_sup,
        0.5,
        0.0,
        Check::AtLeast,
    );
    for m in &off.members {
        rec.row(
            "residual",
            format!("{p};a={}", m.a),
            m.residual,
            5e-4,
            0.0,
            Check::AtMost,
        );
    }
    rec.series(
        "a-vs-residual",
        "a",
        "residual",
        off.members.iter().map(|m| (m.a, m.residual)).collect(),
    );
    Ok(())
}

fn stoch_uniqueness(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 1024.0);
    let n = cfg.ensemble(100);
    let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![1e-2, 1e-3, 1e-4]);
    let drift = cfg.drift(|| Ok(DriftSpec::holder(gamma, 2.0)))?;
    let ensemble = paths(cfg, n, 1, t, dt)?;
    let med = median_separation(&drift, &ensemble, 0.0, &deltas, t)?;
    let p = format!("gamma={gamma};paths={n};dt={}", fmt17(dt));
    for (d, m) in deltas.iter().zip(&med) {
        rec.row(
            "median_separation",
            format!("{p};delta={d}"),
            *m,
            0.0,
            0.0,
            Check::Info,
        );
    }
    // ordered from the largest perturbation to the smallest
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]));
    let decreasing = order.windows(2).all(|w| med[w[1]] < med[w[0]]);
    rec.flag("median_strictly_decreasing", p.clone(), decreasing);
    let probe = pathwise_uniqueness_probe(&drift, &ensemble[0], 0.0, &deltas, t)?;
    if let Some(ext) = probe.extremal {
        let expect = 2.0 * holder_extremal_branch(gamma, 2.0, t);
        rec.row(
            "extremal_separation",
            format!("gamma={gamma};t={t}"),
            ext.separation,
            expect,
            1e-9,
            Check::Within,
        );
        rec.row(
            "euler_seeded_separation",
            format!("gamma={gamma};t={t}"),
            ext.euler_plus - ext.euler_minus,
            expect,
            0.0,
            Check::Info,
        );
    }
    for r in &probe.deterministic {
        rec.row(
            "deterministic_separation",
            format!("delta={}", r.delta),
            r.final_separation,
            0.0,
            0.0,
            Check::Info,
        );
    }
    rec.series(
        "delta-vs-median-separation",
        "delta",
        "median_separation",
        deltas.iter().copied().zip(med.iter().copied()).collect(),
    );
    Ok(())
}

fn mean_pde_mc(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.6);
    let eps = cfg.eps(&[0.05])[0];
    let drift = cfg.drift(|| mollified_holder(gamma, eps))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 256.0);
    let n = cfg.ensemble(10_000);
    let u0 = InitialDatum::SmoothBump {
        center: 0.0,
        radius: 1.0,
    };
    let probes = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let samples: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let path = sample_brownian(cfg.seed, i as u64, 1, t, dt)?;
            probes
                .iter()
                .map(|&x| Ok(u0.value(inverse_flow_backward(&drift, &path, &[x], 0.0, t)?[0])))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mc: Vec<f64> = (0..probes.len())
        .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64)
        .collect();
    let grid = ParabolicGrid::new(cfg.half_width(6.0), cfg.n_x(1200), t, 256)?;
    let u0f = |x: f64| u0.value(x);
    let pde = solve_mean_pde(&drift, &u0f, &grid)?;
    let tol = 3.0 * u0.sup_norm() / (n as f64).sqrt() + 5e-3;
    let mut pde_values = Vec::new();
    for (&x, &m) in probes.iter().zip(&mc) {
        let v = pde.interpolate(t, x)?;
        pde_values.push(v);
        rec.row(
            "mc_vs_pde",
            format!("x={x};paths={n};dt={}", fmt17(dt)),
            m,
            v,
            tol,
            Check::Within,
        );
    }
    let flipped = solve_mean_pde_signed(&drift, &u0f, &grid, DiffusionSign::Backward);
    rec.flag("sign_flipped_diverges", "diffusion=-1/2", flipped.is_err());
    rec.series(
        "x-vs-mc",
        "x",
        "mc_mean",
        probes.iter().copied().zip(mc).collect(),
    );
    rec.series(
        "x-vs-pde",
        "x",
        "pde",
        probes.iter().copied().zip(pde_values).collect(),
    );
    Ok(())
}

fn ito_tanaka(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let eps = cfg.eps(&[0.05])[0];
    let drift = cfg.drift(|| mollified_holder(gamma, eps))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 4096.0);
    let n = cfg.ensemble(20);
    let ensemble = paths(cfg, n, 1, t, dt)?;
    let grid = ParabolicGrid::new(
        cfg.half_width(10.0),
        cfg.n_x(10240),
        t,
        (t / dt).round() as usize,
    )?;
    let f = |x: f64| drift.divergence_1d(0.0, x, 1e-5).unwrap_or(f64::NAN);
    let results = ito_tanaka_batch(&drift, Source::Stationary(&f), &ensemble, 0.0, &grid)?;
    let rel: Vec<f64> = results
        .iter()
        .map(|r| r.residual / (r.lhs.abs() + 0.01))
        .collect();
    rec.row(
        "median_relative_residual",
        format!("gamma={gamma};eps={eps};paths={n};dt={}", fmt17(dt)),
        median(&rel),
        0.05,
        0.0,
        Check::AtMost,
    );
    rec.series(
        "path-vs-relative-residual",
        "path",
        "relative_residual",
        rel.iter()
            .enumerate()
            .map(|(i, r)| (i as f64, *r))
            .collect(),
    );
    Ok(())
}

fn grad_decay(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gammas = cfg.gammas.clone().unwrap_or_else(|| vec![0.1, 0.5]);
    let eps = cfg.eps(&[0.01])[0];
    let lambdas = cfg
        .lambdas
        .clone()
        .unwrap_or_else(|| vec![10.0, 30.0, 100.0, 300.0]);
    let grid = ParabolicGrid::new(cfg.half_width(6.0), cfg.n_x(6144), cfg.t_end(1.0), 32)?;
    for (i, &gamma) in gammas.iter().enumerate() {
        let drift = match (&cfg.drift, i) {
            (Some(d), 0) => d.clone(),
            _ => mollified_holder(gamma, eps)?,
        };
        let table = grad_decay_study(&drift, &lambdas, &grid, 1.0)?;
        let points: Vec<(f64, f64)> = table.rows.clone();
        if i == 0 {
            let mut prev = f64::NAN;
            for &(lambda, g) in &table.rows {
                let bound = if prev.is_nan() { g } else { prev };
                rec.row(
                    "grad_sup",
                    format!("gamma={gamma};eps={eps};lambda={lambda}"),
                    g,
                    bound,
                    0.0,
                    Check::AtMost,
                );
                prev = g;
            }
            let slope = table.slope.unwrap_or(f64::NAN);
            rec.row(
                "loglog_slope",
                format!("gamma={gamma};eps={eps}"),
                slope,
                -0.5,
                0.15,
                Check::Within,
            );
            rec.series("lambda-vs-grad", "lambda", "grad_sup", points);
        } else {
            rec.series(
                &format!("lambda-vs-grad-gamma-{gamma}"),
                "lambda",
                "grad_sup",
                points,
            );
        }
    }
    Ok(())
}

fn zvonkin_equivalence(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let eps = cfg.eps(&[0.05])[0];
    let lambda = cfg.lambdas.as_ref().map_or(50.0, |l| l[0]);
    let drift = cfg.drift(|| mollified_holder(gamma, eps))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 1024.0);
    let grid = ParabolicGrid::new(cfg.half_width(6.0), cfg.n_x(3072), t, 64)?;
    let z = build_zvonkin_transform(&drift, lambda, &grid, 0.5)?;
    let path = sample_brownian(cfg.seed, 0, 1, t, dt)?;
    let x0 = 0.3;
    let direct = integrate_sde(&drift, &path, &[x0], 0.0, t)?;
    let conj = z.solve_conjugated(&path, x0, 0.0, t)?;
    let diffs: Vec<(f64, f64)> = direct
        .times
        .iter()
        .zip(direct.states.iter().zip(&conj.states))
        .map(|(&s, (a, c))| (s, (a - c).abs()))
        .collect();
    let sup = diffs.iter().fold(0.0f64, |m, d| m.max(d.1));
    let bound = 3.0 * (dt.sqrt() + grid.h());
    let p = format!(
        "gamma={gamma};eps={eps};lambda={lambda};dt={};h_x={}",
        fmt17(dt),
        fmt17(grid.h())
    );
    rec.row("sup_difference", p.clone(), sup, bound, 0.0, Check::AtMost);
    rec.row("grad_sup", p, z.grad_sup, 1.0, 0.0, Check::Info);
    rec.series("time-vs-difference", "t", "abs_difference", diffs);
    Ok(())
}

fn measure_preservation(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let drift = cfg.drift(|| Ok(DriftSpec::Rotation2D { omega: 2.0 }))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(t / 256.0);
    let n = cfg.n_x(32);
    let l = cfg.half_width(1.0);
    let path = sample_brownian(cfg.seed, 0, 2, t, dt)?;
    let grid = FlowGrid::square(-l, l, n)?;
    let worst = |scheme: Scheme| -> Result<f64> {
        let ens = forward_flow_with(&drift, &path, &grid, 0.0, &[t], scheme)?;
        let mut w = 0.0f64;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                w = w.max((jacobian_fd(&ens, i + n * j, t)? - 1.0).abs());
            }
        }
        Ok(w)
    };
    let p = format!("grid={n}x{n};n_steps={}", path.n_steps());
    rec.row(
        "jacobian_error",
        format!("{p};scheme=implicit_midpoint"),
        worst(Scheme::ImplicitMidpoint)?,
        1e-6,
        0.0,
        Check::AtMost,
    );
    rec.row(
        "jacobian_error",
        format!("{p};scheme=euler"),
        worst(Scheme::EulerMaruyama)?,
        0.0,
        0.0,
        Check::Info,
    );
    Ok(())
}

fn jacobian_routes(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.7);
    let eps = cfg.eps(&[0.05])[0];
    let drift = cfg.drift(|| mollified_holder(gamma, eps))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 4096.0);
    let h = 1.0 / 256.0;
    let n = cfg.ensemble(10);
    let x = 0.25;
    let ensemble = paths(cfg, n, 1, t, dt)?;
    let rel: Vec<f64> = ensemble
        .par_iter()
        .map(|p| {
            let r = jacobian_record_1d(&drift, p, x, t, h)?;
            Ok((r.log_div.exp() - r.det_fd).abs() / r.det_fd)
        })
        .collect::<Result<_>>()?;
    rec.row(
        "median_relative_gap",
        format!(
            "gamma={gamma};eps={eps};x={x};dt={};h_x={}",
            fmt17(dt),
            fmt17(h)
        ),
        median(&rel),
        5e-2,
        0.0,
        Check::AtMost,
    );
    rec.series(
        "path-vs-relative-gap",
        "path",
        "relative_gap",
        rel.iter()
            .enumerate()
            .map(|(i, r)| (i as f64, *r))
            .collect(),
    );
    Ok(())
}

fn commutator_decay(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let v = cfg.drift(|| Ok(DriftSpec::holder(gamma, 2.0)))?;
    let eps = cfg.eps(&[0.1, 0.05, 0.025, 0.0125]);
    let t_end = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 256.0);
    let n = cfg.ensemble(10);
    let rho = PolyBump::new(0.2, 1.0);
    let quad = CommutatorQuad::default();
    let u0 = InitialDatum::Step { threshold: 0.0 };
    let quiet = BrownianPath::zero(1, t_end, dt)?;
    let g = ShiftedDatum {
        u0: &u0,
        path: &quiet,
    };
    let plain = commutator_ladder(&v, &g, 0.0, &eps, &rho, quad)?;
    rec.row(
        "decay_exponent",
        format!("gamma={gamma}"),
        plain.exponent.unwrap_or(f64::NAN),
        0.3,
        0.0,
        Check::AtLeast,
    );
    rec.series(
        "eps-vs-commutator",
        "eps",
        "abs_commutator",
        eps.iter()
            .copied()
            .zip(plain.values.iter().map(|v| v.abs()))
            .collect(),
    );
    let times: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|f| f * t_end).collect();
    let ensemble = paths(cfg, n, 1, t_end, dt)?;
    let l = cfg.half_width(3.0);
    let grid = FlowGrid::line(-l, l, cfg.n_x(1537))?;
    // per path: times x eps
    let per_path: Vec<Vec<Vec<f64>>> = ensemble
        .par_iter()
        .map(|p| {
            let ens = forward_flow(&v, p, &grid, 0.0, &times)?;
            times
                .iter()
                .map(|&t| {
                    eps.iter()
                        .map(|&e| {
                            Ok(commutator_along_flow(&v, &g, 0.0, e, &rho, &ens, t, quad)?.abs())
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    for (ti, &t) in times.iter().enumerate() {
        let med: Vec<f64> = (0..eps.len())
            .map(|ei| median(&per_path.iter().map(|r| r[ti][ei]).collect::<Vec<_>>()))
            .collect();
        let monotone = med.windows(2).all(|w| w[1] < w[0]);
        rec.flag(
            "along_flow_monotone",
            format!("gamma={gamma};t={t};paths={n}"),
            monotone,
        );
        rec.series(
            &format!("eps-vs-along-flow-t{t}"),
            "eps",
            "median_abs_commutator",
            eps.iter().copied().zip(med).collect(),
        );
    }
    Ok(())
}

fn wong_zakai(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.6);
    let eps = cfg.eps(&[0.05])[0];
    let drift = cfg.drift(|| mollified_holder(gamma, eps))?;
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 1024.0);
    let n = cfg.ensemble(20);
    let ns = cfg.ns.clone().unwrap_or_else(|| vec![8, 16, 32, 64]);
    let xs = [-1.0, 0.0, 1.0];
    let ensemble = paths(cfg, n, 1, t, dt)?;
    // per path: error for each n
    let errors: Vec<Vec<f64>> = ensemble
        .par_iter()
        .map(|p| {
            let reference: Vec<f64> = xs
                .iter()
                .map(|&x| Ok(flow_endpoint(&drift, p, &[x], 0.0, t)?[0]))
                .collect::<Result<_>>()?;
            ns.iter()
                .map(|&m| {
                    let smooth = wong_zakai_smooth(p, m)?;
                    let mut worst = 0.0f64;
                    for (&x, r) in xs.iter().zip(&reference) {
                        worst = worst
                            .max((wong_zakai_flow(&drift, &smooth, &[x], t, dt)?[0] - r).abs());
                    }
                    Ok(worst)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let med: Vec<f64> = (0..ns.len())
        .map(|j| median(&errors.iter().map(|e| e[j]).collect::<Vec<_>>()))
        .collect();
    for (&m, &e) in ns.iter().zip(&med) {
        rec.row(
            "median_error",
            format!("n={m};paths={n}"),
            e,
            0.0,
            0.0,
            Check::Info,
        );
    }
    let (first, last) = (0, ns.len() - 1);
    rec.row(
        "error_reduction",
        format!("n={}->{}", ns[first], ns[last]),
        med[first] / med[last],
        1.5,
        0.0,
        Check::AtLeast,
    );
    rec.series(
        "n-vs-error",
        "n",
        "median_sup_error",
        ns.iter().map(|&m| m as f64).zip(med).collect(),
    );
    Ok(())
}

fn negative_example(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 1024.0);
    let path = sample_brownian(cfg.seed, 0, 1, t, dt)?;
    let r = random_drift_negative_probe(&path, t)?;
    let p = format!("t={t};dt={}", fmt17(dt));
    rec.row(
        "zero_branch_residual",
        p.clone(),
        r.zero_branch_residual,
        5.0 * dt,
        0.0,
        Check::AtMost,
    );
    rec.row(
        "quadratic_branch_residual",
        p.clone(),
        r.quadratic_branch_residual,
        5.0 * dt,
        0.0,
        Check::AtMost,
    );
    rec.row(
        "separation",
        p,
        r.separation,
        t * t / 4.0,
        1e-12,
        Check::Within,
    );
    Ok(())
}

fn sobolev_jacobian(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gammas = cfg.gammas.clone().unwrap_or_else(|| vec![0.25, 0.75]);
    let eps = cfg.eps(&[0.1, 0.05, 0.025]);
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 512.0);
    let n = cfg.ensemble(8);
    let h_x = 1.0 / 64.0;
    let ensemble = paths(cfg, n, 1, t, dt)?;
    let table = sobolev_jacobian_probe(&ensemble, 1.0, h_x, 2.0, &gammas, &eps, 16)?;
    for r in &table.rows {
        rec.row(
            "energy",
            format!(
                "gamma={};eps={};std_err={}",
                r.gamma,
                r.eps,
                fmt17(r.std_err)
            ),
            r.estimate,
            0.0,
            0.0,
            Check::Info,
        );
    }
    for &g in &gammas {
        rec.series(
            &format!("eps-vs-energy-gamma-{g}"),
            "eps",
            "energy",
            table
                .rows
                .iter()
                .filter(|r| r.gamma == g)
                .map(|r| (r.eps, r.estimate))
                .collect(),
        );
    }
    let (rough, smooth) = (gammas[0], gammas[gammas.len() - 1]);
    let gr = table.growth(rough).unwrap_or(f64::NAN);
    let gs = table.growth(smooth).unwrap_or(f64::NAN);
    rec.row(
        "growth",
        format!("gamma={rough}"),
        gr,
        0.0,
        0.0,
        Check::Info,
    );
    rec.row(
        "growth",
        format!("gamma={smooth}"),
        gs,
        0.0,
        0.0,
        Check::Info,
    );
    rec.row(
        "growth_ratio",
        format!("gamma={rough}/gamma={smooth}"),
        gr / gs,
        1.0,
        0.0,
        Check::Above,
    );
    Ok(())
}

fn uniqueness_gap(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let gamma = cfg.gamma(0.5);
    let t = cfg.t_end(1.0);
    let dt = cfg.dt(1.0 / 512.0);
    let n = cfg.ensemble(10);
    let drift = cfg.drift(|| Ok(DriftSpec::holder(gamma, 2.0)))?;
    let params = GapParams {
        gamma,
        cap: 2.0,
        t,
        theta: PolyBump::new(0.3, 1.5),
        n_x: cfg.n_x(512),
        n_s: (t / dt).round() as usize,
        flow_points: 1025,
        flow_half_width: cfg.half_width(4.0),
    };
    let ensemble = paths(cfg, n, 1, t, dt)?;
    let report = uniqueness_gap_experiment(
        &params,
        &InitialDatum::Step { threshold: 0.0 },
        &[0.5],
        Some((&drift, &ensemble)),
    )?;
    let on = report
        .noise_on
        .ok_or_else(|| config_error("experiment", "noise-on report missing"))?;
    let p = format!("gamma={gamma};paths={n};dt={}", fmt17(dt));
    rec.row(
        "median_characteristics_residual",
        p.clone(),
        on.median_characteristics,
        0.0,
        0.0,
        Check::Info,
    );
    rec.row(
        "median_naive_residual",
        p.clone(),
        on.median_naive,
        0.0,
        0.0,
        Check::Info,
    );
    rec.row(
        "residual_ratio",
        p,
        on.median_characteristics / on.median_naive,
        0.1,
        0.0,
        Check::AtMost,
    );
    rec.series(
        "path-vs-characteristics-residual",
        "path",
        "residual",
        on.rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.characteristics))
            .collect(),
    );
    rec.series(
        "path-vs-naive-residual",
        "path",
        "residual",
        on.rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.naive))
            .collect(),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_covers_every_criterion() {
        let list = list_experiments();
        assert!(list.len() >= 13);
        for id in [
            "det-nonuniqueness",
            "mean-pde-mc",
            "zero-drift-sanity",
            "grad-decay",
            "wong-zakai",
        ] {
            assert!(list.iter().any(|e| e.id == id), "{id}");
        }
        for c in 1..=13u8 {
            assert_eq!(
                list.iter().filter(|e| e.criterion == Some(c)).count(),
                1,
                "criterion {c}"
            );
        }
    }

    #[test]
    fn config_requires_seed_and_reports_fields() {
        let err =
            ExperimentConfig::from_json(r#"{"experiment": "zero-drift-sanity"}"#, &[]).unwrap_err();
        assert!(matches!(err, LabError::InvalidConfig { ref field, .. } if field == "seed"));
        let err = ExperimentConfig::from_json(
            r#"{"experiment": "zero-drift-sanity", "seed": 1, "grid": {"dt": "x"}}"#,
            &[],
        )
        .unwrap_err();
        assert!(
            matches!(err, LabError::InvalidConfig { ref field, .. } if field == "grid.dt"),
            "{err}"
        );
        let err =
            ExperimentConfig::from_json(r#"{"experiment": "nope", "seed": 1}"#, &[]).unwrap_err();
        assert!(matches!(err, LabError::UnknownExperiment(_)));
        let err = ExperimentConfig::from_json(
            r#"{"experiment": "grad-decay", "seed": 1, "lambdas": [10, 5, 30]}"#,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, LabError::InvalidConfig { ref field, .. } if field == "lambdas"));
    }

    #[test]
    fn overrides_win_over_the_file() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment": "zero-drift-sanity", "seed": 1, "grid": {"dt": 0.01}}"#,
            &[
                "grid.dt=0.02".into(),
                "seed=7".into(),
                "grid.n_x=16".into(),
                "eps=[0.2,0.1]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.grid.dt, Some(0.02));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.n_x, Some(16));
        assert_eq!(cfg.eps, Some(vec![0.2, 0.1]));
        assert!(ExperimentConfig::from_json(
            r#"{"experiment": "zero-drift-sanity", "seed": 1}"#,
            &["bogus".into()]
        )
        .is_err());
    }

    #[test]
    fn pass_flag_is_a_function_of_the_numbers() {
        assert!(Check::Within.passes(1.05, 1.0, 0.1));
        assert!(!Check::Within.passes(f64::NAN, 1.0, 0.1));
        assert!(Check::AtMost.passes(0.5, 0.5, 0.0));
        assert!(!Check::Above.passes(1.0, 1.0, 0.0));
        assert!(Check::Info.passes(f64::NAN, 0.0, 0.0));
        let row = ReportRow::new("r", "", 2.0, 1.0, 0.5, Check::AtMost);
        assert!(!row.pass);
    }

    #[test]
    fn zero_drift_run_is_deterministic_and_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new("zero-drift-sanity", 1);
        cfg.grid.n_x = Some(16);
        cfg.grid.dt = Some(1.0 / 64.0);
        cfg.output_dir = Some(dir.path().to_path_buf());
        let a = run_experiment(&cfg).unwrap();
        assert!(a.all_pass(), "{:?}", a.rows);
        let first = std::fs::read(dir.path().join("zero-drift-sanity.csv")).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let second = std::fs::read(dir.path().join("zero-drift-sanity.csv")).unwrap();
        assert_eq!(first, second);
        assert_eq!(a.rows, b.rows);
        let text = std::fs::read_to_string(dir.path().join("zero-drift-sanity.json")).unwrap();
        let back = ExperimentReport::from_json(&text).unwrap();
        assert_eq!(back.rows, a.rows);
        assert_eq!(back.artifacts.len(), 2);
    }

    #[test]
    fn plot_data_selects_a_series() {
        let mut cfg = ExperimentConfig::new("zero-drift-sanity", 2);
        cfg.grid.n_x = Some(8);
        cfg.grid.dt = Some(0.25);
        let report = run_experiment(&cfg).unwrap();
        let mut buf = Vec::new();
        emit_plot_data(&report, "time-vs-translation-error", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,max_error"));
        assert_eq!(text.lines().count(), 6);
        assert!(matches!(
            emit_plot_data(&report, "missing", Vec::new()),
            Err(LabError::UnknownSeries(_))
        ));
        let empty = ExperimentReport {
            rows: Vec::new(),
            series: BTreeMap::new(),
            ..report
        };
        let mut buf = Vec::new();
        emit_plot_data(&empty, "anything", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y\n");
    }

    #[test]
    fn grad_decay_reports_four_rows_and_a_slope() {
        let mut cfg = ExperimentConfig::new("grad-decay", 1);
        cfg.gammas = Some(vec![0.5]);
        cfg.eps = Some(vec![0.05]);
        cfg.grid.n_x = Some(768);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(
            report.rows.iter().filter(|r| r.name == "grad_sup").count(),
            4
        );
        assert_eq!(
            report
                .rows
                .iter()
                .filter(|r| r.name == "loglog_slope")
                .count(),
            1
        );
        let mut buf = Vec::new();
        emit_plot_data(&report, "lambda-vs-grad", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
