//! Audit reports over a solved field.
//!
//! Every audit produces a [`Report`]: rows `{x, r, kind, value, pass}` plus
//! an optional reason and numeric details, a summary map, and an overall
//! pass flag. Failed checks are rows, never errors; errors are reserved for
//! unusable inputs. Per-point work runs in parallel and is merged in point
//! order, so reports are reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    blowup_fit, classify_point, decay_audit, density_ladder, normal_derivative, weak_identity_check, ClassifyParams,
    DecayParams, Label,
};
use crate::error::{Error, Result};
use crate::field::{vec2, Ball, Point, ScalarField};
use crate::geometry::{
    ahlfors_ratio, audit_points, corkscrew, harnack_chain, verify_almost_min, AuditPoint, BoundaryIndex,
    FreeBoundary, Side, Vertex,
};
use crate::io::to_json_pretty;
use crate::monotone::{acf, audit_monotone, Ladder};
use crate::problem::{AlmostMinParams, WeightField};
use crate::run::{load_run, Config, ManifestBuilder, RunManifest};
use crate::solver::{harmonic_replace, HarmonicMeasure};

pub const REPORT_SCHEMA: &str = "fblab.report.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Weiss,
    Acf,
    Nta,
    Ahlfors,
    Amin,
    Classify,
    Decay,
}

impl AuditKind {
    pub const ALL: [AuditKind; 7] = [
        AuditKind::Weiss,
        AuditKind::Acf,
        AuditKind::Nta,
        AuditKind::Ahlfors,
        AuditKind::Amin,
        AuditKind::Classify,
        AuditKind::Decay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditKind::Weiss => "weiss",
            AuditKind::Acf => "acf",
            AuditKind::Nta => "nta",
            AuditKind::Ahlfors => "ahlfors",
            AuditKind::Amin => "amin",
            AuditKind::Classify => "classify",
            AuditKind::Decay => "decay",
        }
    }

    /// Parses one kind or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<AuditKind>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|k| k.trim().parse()).collect()
    }
}

impl FromStr for AuditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown audit `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeissAuditConfig {
    pub r_max: f64,
    pub gamma: f64,
    pub r_min_h: f64,
    pub tau_disc: f64,
    pub c_hat_max: f64,
}

impl Default for WeissAuditConfig {
    fn default() -> Self {
        Self { r_max: 0.25, gamma: 0.8, r_min_h: 6.0, tau_disc: crate::monotone::TAU_DISC, c_hat_max: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcfAuditConfig {
    pub r_max: f64,
    pub gamma: f64,
    pub r_min_h: f64,
    /// Allowed decrease of `F` per step.
    pub tol: f64,
}

impl Default for AcfAuditConfig {
    fn default() -> Self {
        Self { r_max: 0.25, gamma: 0.8, r_min_h: 8.0, tol: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtaAuditConfig {
    /// Radii double from `r_min_h · h` and end at `r_max`.
    pub r_min_h: f64,
    pub r_max: f64,
    pub c1_max: f64,
    pub c2_max: f64,
    pub c3_max: f64,
}

impl Default for NtaAuditConfig {
    fn default() -> Self {
        Self { r_min_h: 8.0, r_max: 0.25, c1_max: 8.0, c2_max: 8.0, c3_max: 40.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AhlforsAuditConfig {
    pub lower: f64,
    pub upper: f64,
    /// Number of audit points used for harmonic measure (taken evenly).
    pub hm_points: usize,
    pub hm_radii: Vec<f64>,
    /// Largest allowed ratio between extreme values of `ω(B(z, r))/r`.
    pub hm_band: f64,
    /// Pole of the harmonic measure; chosen automatically when absent.
    pub pole: Option<Point>,
}

impl Default for AhlforsAuditConfig {
    fn default() -> Self {
        Self { lower: 0.5, upper: 2.0, hm_points: 8, hm_radii: vec![0.05, 0.1, 0.2], hm_band: 20.0, pole: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AminAuditConfig {
    pub n_balls: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub tau_disc: f64,
    pub min_pass_fraction: f64,
    pub replacement_radius: f64,
    pub replacement_tol: f64,
}

impl Default for AminAuditConfig {
    fn default() -> Self {
        Self {
            n_balls: 50,
            r_min: 0.05,
            r_max: 0.2,
            seed: 17,
            tau_disc: crate::monotone::TAU_DISC,
            min_pass_fraction: 0.95,
            replacement_radius: 0.2,
            replacement_tol: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyAuditConfig {
    pub r_max: f64,
    pub params: ClassifyParams,
    pub blowup_radius: f64,
    pub slope_consistency: f64,
    pub normal_tol: f64,
    pub normal_min_fraction: f64,
    pub replacement_radius: f64,
    pub replacement_normal_tol: f64,
    pub weak_trials: usize,
    pub weak_tol: f64,
    pub seed: u64,
}

impl Default for ClassifyAuditConfig {
    fn default() -> Self {
        Self {
            r_max: 0.25,
            params: ClassifyParams::default(),
            blowup_radius: 0.1,
            slope_consistency: 0.03,
            normal_tol: 0.05,
            normal_min_fraction: 0.9,
            replacement_radius: 0.2,
            replacement_normal_tol: 0.1,
            weak_trials: 20,
            weak_tol: 0.1,
            seed: 29,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayAuditConfig {
    pub params: DecayParams,
    pub min_pass_fraction: f64,
}

impl Default for DecayAuditConfig {
    fn default() -> Self {
        Self { params: DecayParams::default(), min_pass_fraction: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Boundary points equispaced by arc length inside the audit region.
    pub n_points: usize,
    /// The audit region is the grid rectangle shrunk by
    /// `max(margin_fraction · extent, largest radius + 2h)`.
    pub margin_fraction: f64,
    /// Explicit audit points, replacing the automatic choice.
    pub points: Option<Vec<Point>>,
    pub weiss: WeissAuditConfig,
    pub acf: AcfAuditConfig,
    pub nta: NtaAuditConfig,
    pub ahlfors: AhlforsAuditConfig,
    pub amin: AminAuditConfig,
    pub classify: ClassifyAuditConfig,
    pub decay: DecayAuditConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n_points: 16,
            margin_fraction: 0.1,
            points: None,
            weiss: Default::default(),
            acf: Default::default(),
            nta: Default::default(),
            ahlfors: Default::default(),
            amin: Default::default(),
            classify: Default::default(),
            decay: Default::default(),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("weiss.r_max", self.weiss.r_max),
            ("acf.r_max", self.acf.r_max),
            ("nta.r_max", self.nta.r_max),
            ("amin.r_min", self.amin.r_min),
            ("amin.r_max", self.amin.r_max),
            ("classify.r_max", self.classify.r_max),
            ("classify.blowup_radius", self.classify.blowup_radius),
            ("decay.params.r0", self.decay.params.r0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("audit.{name} must be positive")));
            }
        }
        if self.amin.r_min > self.amin.r_max {
            return Err(Error::param("audit.amin.r_min exceeds audit.amin.r_max"));
        }
        for (name, g) in [("weiss.gamma", self.weiss.gamma), ("acf.gamma", self.acf.gamma)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Parameter(format!("audit.{name} must lie in (0, 1)")));
            }
        }
        let d = &self.decay.params;
        if !(d.eta > 0.0 && d.eta < 1.0) {
            return Err(Error::param("audit.decay.params.eta must lie in (0, 1)"));
        }
        if !(d.theta > 0.0 && d.theta < 1.0) {
            return Err(Error::param("audit.decay.params.theta must lie in (0, 1)"));
        }
        if !(0.0..0.5).contains(&self.margin_fraction) {
            return Err(Error::param("audit.margin_fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Largest radius any audit uses around an audit point.
    pub fn max_radius(&self) -> f64 {
        [
            self.weiss.r_max,
            self.acf.r_max,
            self.nta.r_max,
            self.amin.replacement_radius,
            self.amin.r_max * 1.25,
            self.classify.r_max,
            self.classify.replacement_radius,
            self.classify.blowup_radius,
            self.decay.params.r0,
        ]
        .into_iter()
        .chain(self.ahlfors.hm_radii.iter().copied())
        .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub x: Option<Point>,
    pub r: Option<f64>,
    pub kind: String,
    pub value: Option<f64>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, f64>,
}

impl Row {
    fn new(x: Option<Point>, r: Option<f64>, kind: &str, value: Option<f64>, pass: bool) -> Self {
        Self { x, r, kind: kind.into(), value, pass, reason: None, detail: BTreeMap::new() }
    }

    fn at(x: Point, r: f64, kind: &str, value: f64, pass: bool) -> Self {
        Self::new(Some(x), Some(r), kind, Some(value), pass)
    }

    fn failed(x: Point, r: Option<f64>, kind: &str, err: &Error) -> Self {
        Self::new(Some(x), r, kind, None, false).because(err.to_string())
    }

    fn because(mut self, reason: impl Into<String>) -> Self {
        self.reason = Some(reason.into());
        self
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.detail.insert(key.into(), v);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub kind: AuditKind,
    pub pass: bool,
    pub summary: BTreeMap<String, f64>,
    pub rows: Vec<Row>,
}

impl Report {
    fn new(kind: AuditKind, rows: Vec<Row>) -> Self {
        Self { schema: REPORT_SCHEMA.into(), kind, pass: false, summary: BTreeMap::new(), rows }
    }

    pub fn rows_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    fn fraction(&self, kind: &str) -> f64 {
        let (n, ok) = self.rows_of(kind).fold((0, 0), |(n, ok), r| (n + 1, ok + r.pass as usize));
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    }

    fn all(&self, kind: &str) -> bool {
        self.rows_of(kind).all(|r| r.pass)
    }

    pub fn to_json(&self) -> String {
        to_json_pretty(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,r,kind,value,pass,reason,detail\n");
        let num = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        for row in &self.rows {
            let detail: Vec<String> = row.detail.iter().map(|(k, v)| format!("{k}={v:?}")).collect();
            let reason = row.reason.as_deref().unwrap_or("").replace('"', "'");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},\"{}\",{}",
                num(row.x.map(|p| p[0])),
                num(row.x.map(|p| p[1])),
                num(row.r),
                row.kind,
                num(row.value),
                row.pass,
                reason,
                detail.join(";")
            );
        }
        s
    }
}

/// Everything an audit reads.
pub struct AuditInput<'a> {
    pub u: &'a ScalarField,
    pub boundary: &'a FreeBoundary,
    pub weights: &'a WeightField,
    pub almost_min: AlmostMinParams,
}

struct Ctx<'a> {
    input: &'a AuditInput<'a>,
    cfg: &'a AuditConfig,
    index: BoundaryIndex,
    points: Vec<AuditPoint>,
    h: f64,
}

/// Audit region: the grid rectangle shrunk by the configured margin.
pub fn audit_region(u: &ScalarField, cfg: &AuditConfig) -> (Point, Point) {
    let g = u.grid();
    let margin = (cfg.margin_fraction * g.min_extent()).max(cfg.max_radius() + 2.0 * g.spacing());
    let lo = [g.origin()[0] + margin, g.origin()[1] + margin];
    let hi = [g.upper(0) - margin, g.upper(1) - margin];
    (lo, hi)
}

fn nearest_normal(fb: &FreeBoundary, p: Point) -> Point {
    fb.vertices()
        .min_by(|a, b| vec2::dist(a.pos, p).total_cmp(&vec2::dist(b.pos, p)))
        .map_or([0.0, 1.0], |v| v.normal)
}

/// Audit points: configured ones, or equispaced by arc length in the region.
pub fn select_points(input: &AuditInput<'_>, cfg: &AuditConfig) -> Vec<AuditPoint> {
    match &cfg.points {
        Some(pts) => pts.iter().map(|&p| AuditPoint { pos: p, normal: nearest_normal(input.boundary, p) }).collect(),
        None => {
            let (lo, hi) = audit_region(input.u, cfg);
            audit_points(input.boundary, lo, hi, cfg.n_points)
        }
    }
}

impl<'a> Ctx<'a> {
    fn new(input: &'a AuditInput<'a>, cfg: &'a AuditConfig) -> Result<Self> {
        if input.u.grid().rank() != 2 {
            return Err(Error::param("audits are implemented for rank-2 fields"));
        }
        let index = BoundaryIndex::for_grid(input.boundary, input.u.grid())?;
        let points = select_points(input, cfg);
        Ok(Self { input, cfg, index, points, h: input.u.grid().spacing() })
    }

    fn par_points<T: Send>(&self, f: impl Fn(usize, &AuditPoint) -> T + Sync) -> Vec<T> {
        self.points.par_iter().enumerate().map(|(i, p)| f(i, p)).collect()
    }

    fn nta_radii(&self) -> Vec<f64> {
        let c = &self.cfg.nta;
        let mut out = Vec::new();
        let mut r = c.r_min_h * self.h;
        while r < c.r_max * (1.0 - 1e-9) {
            out.push(r);
            r *= 2.0;
        }
        out.push(c.r_max);
        out
    }
}

/// A report whose radius ladder cannot be built at this resolution.
fn unresolved(kind: AuditKind, row_kind: &str, err: &Error) -> Report {
    let row = Row::new(None, None, row_kind, None, false).because(err.to_string());
    Report::new(kind, vec![row])
}

fn summarize_points(report: &mut Report, n: usize) {
    report.summary.insert("points".into(), n as f64);
}

fn weiss_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.weiss;
    let ladder = match Ladder::new(c.r_max, c.gamma, c.r_min_h * ctx.h) {
        Ok(l) => l,
        Err(e) => return Ok(unresolved(AuditKind::Weiss, "weiss", &e)),
    };
    let inp = ctx.input;
    let per_point = ctx.par_points(|_, p| {
        match audit_monotone(inp.u, inp.weights, &inp.almost_min, p.pos, &ladder, c.tau_disc) {
            Err(e) => vec![Row::failed(p.pos, None, "weiss", &e)],
            Ok(a) => {
                let mut rows: Vec<Row> = a
                    .samples
                    .iter()
                    .map(|s| Row::at(p.pos, s.r, "weiss_sample", s.w, true).with("w_tilde", s.w_tilde))
                    .collect();
                rows.extend(a.steps.iter().map(|s| {
                    Row::at(p.pos, s.r, "weiss_step", s.defect, s.pass)
                        .with("s", s.s)
                        .with("dissipation", s.dissipation)
                        .with("allowance", a.c_hat * s.r.powf(a.alpha) + a.tau_disc)
                        .with("strengthened", s.pass_strengthened as u8 as f64)
                }));
                let mut row = Row::new(Some(p.pos), None, "c_hat", Some(a.c_hat), a.c_hat <= c.c_hat_max);
                if let Some(f) = a.w0 {
                    row = row.with("w0", f.w0);
                }
                rows.push(row);
                rows
            }
        }
    });
    let mut report = Report::new(AuditKind::Weiss, per_point.into_iter().flatten().collect());
    let c_hat = report.rows_of("c_hat").filter_map(|r| r.value).fold(0.0, f64::max);
    report.summary.insert("c_hat_max".into(), c_hat);
    summarize_points(&mut report, ctx.points.len());
    report.pass = report.rows.iter().all(|r| r.pass);
    Ok(report)
}

fn acf_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.acf;
    let mut radii = match Ladder::new(c.r_max, c.gamma, c.r_min_h * ctx.h) {
        Ok(l) => l.radii(),
        Err(e) => return Ok(unresolved(AuditKind::Acf, "acf", &e)),
    };
    radii.reverse();
    let u = ctx.input.u;
    let per_point = ctx.par_points(|_, p| match acf(u, p.pos, &radii) {
        Err(e) => vec![Row::failed(p.pos, None, "acf", &e)],
        Ok(samples) => {
            let mut prev: Option<f64> = None;
            samples
                .iter()
                .map(|s| {
                    let pass = prev.is_none_or(|q| s.f >= q - c.tol);
                    prev = Some(s.f);
                    Row::at(p.pos, s.r, "acf", s.f, pass).with("phi_f", s.phi_f).with("phi_g", s.phi_g)
                })
                .collect()
        }
    });
    let mut report = Report::new(AuditKind::Acf, per_point.into_iter().flatten().collect());
    summarize_points(&mut report, ctx.points.len());
    report.pass = report.rows.iter().all(|r| r.pass);
    Ok(report)
}

fn nta_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.nta;
    let u = ctx.input.u;
    let radii = ctx.nta_radii();
    let complement = u.map(|v| if v > 0.0 { -1.0 } else { 1.0 })?;
    let sides = [(Side::Interior, "interior"), (Side::Exterior, "exterior")];
    // found[side][radius][point]
    let found: Vec<Vec<Vec<Option<Point>>>> = sides
        .iter()
        .map(|&(side, _)| {
            radii
                .iter()
                .map(|&r| {
                    ctx.points
                        .par_iter()
                        .map(|p| corkscrew(u, &ctx.index, p.pos, r, side).ok().flatten().map(|k| k.point))
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (s, &(side, name)) in sides.iter().enumerate() {
        let kind = format!("corkscrew_{name}");
        for (k, &r) in radii.iter().enumerate() {
            let rs: Vec<Row> = ctx.par_points(|_, p| match corkscrew(u, &ctx.index, p.pos, r, side) {
                Err(e) => Row::failed(p.pos, Some(r), &kind, &e),
                Ok(None) => Row::new(Some(p.pos), Some(r), &kind, None, false).because("no corkscrew point"),
                Ok(Some(cs)) => {
                    let c1 = cs.c1(r);
                    Row::at(p.pos, r, &kind, c1, c1 <= c.c1_max)
                        .with("px", cs.point[0])
                        .with("py", cs.point[1])
                        .with("clearance", cs.clearance)
                }
            });
            debug_assert_eq!(rs.len(), found[s][k].len());
            rows.extend(rs);
        }
    }
    let g = u.grid();
    let reach = 0.25 * g.extent(0).hypot(g.extent(1));
    let mut jobs = Vec::new();
    for (s, _) in sides.iter().enumerate() {
        for (k, &r) in radii.iter().enumerate() {
            let pts = &found[s][k];
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    if let (Some(x), Some(y)) = (pts[i], pts[j]) {
                        if vec2::dist(x, y) <= reach {
                            jobs.push((s, r, x, y));
                        }
                    }
                }
            }
        }
    }
    let chain_rows: Vec<Row> = jobs
        .par_iter()
        .map(|&(s, r, x, y)| {
            let field = if s == 0 { u } else { &complement };
            let kind = format!("harnack_{}", sides[s].1);
            match harnack_chain(field, &ctx.index, x, y) {
                Err(e) => Row::failed(x, Some(r), &kind, &e).with("yx", y[0]).with("yy", y[1]),
                Ok(ch) => {
                    let pass = ch.connected && ch.c2 <= c.c2_max && ch.c3() <= c.c3_max;
                    let mut row = Row::at(x, r, &kind, ch.c2, pass)
                        .with("yx", y[0])
                        .with("yy", y[1])
                        .with("n", ch.len() as f64)
                        .with("ell", ch.ell as f64)
                        .with("c3", ch.c3())
                        .with("retried", ch.retried as u8 as f64);
                    if !ch.connected {
                        row = row.because("no path with the required clearance");
                    }
                    row
                }
            }
        })
        .collect();
    rows.extend(chain_rows);
    let mut report = Report::new(AuditKind::Nta, rows);
    let worst = |kind: &str| {
        report.rows.iter().filter(|r| r.kind.starts_with(kind)).map(|r| r.value.unwrap_or(f64::INFINITY)).fold(0.0, f64::max)
    };
    let (c1, c2) = (worst("corkscrew_"), worst("harnack_"));
    let c3 = report.rows.iter().filter_map(|r| r.detail.get("c3").copied()).fold(0.0, f64::max);
    let failures = report.rows.iter().filter(|r| r.kind.starts_with("harnack_") && !r.pass).count();
    report.summary.insert("c1".into(), c1);
    report.summary.insert("c2".into(), c2);
    report.summary.insert("c3".into(), c3);
    report.summary.insert("chain_failures".into(), failures as f64);
    report.summary.insert("chains".into(), jobs.len() as f64);
    summarize_points(&mut report, ctx.points.len());
    report.pass = report.rows.iter().all(|r| r.pass);
    Ok(report)
}

/// Interior node maximizing the distance to both the free boundary and the
/// grid boundary, scanned on a stride of 4 nodes.
fn default_pole(u: &ScalarField, index: &BoundaryIndex) -> Option<Point> {
    let g = u.grid();
    let mut best: Option<(f64, Point)> = None;
    for j in (1..g.ny() - 1).step_by(4) {
        for i in (1..g.nx() - 1).step_by(4) {
            if u.at2(i, j) <= 0.0 {
                continue;
            }
            let p = g.node2(i, j);
            let edge = (p[0] - g.origin()[0])
                .min(g.upper(0) - p[0])
                .min(p[1] - g.origin()[1])
                .min(g.upper(1) - p[1]);
            let d = index.distance(p).min(edge);
            if best.is_none_or(|b| d > b.0) {
                best = Some((d, p));
            }
        }
    }
    best.map(|b| b.1)
}

fn ahlfors_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.ahlfors;
    let inp = ctx.input;
    let radii = ctx.nta_radii();
    let per_point = ctx.par_points(|_, p| {
        radii
            .iter()
            .map(|&r| match ahlfors_ratio(inp.boundary, inp.u.grid(), p.pos, r) {
                Err(e) => Row::failed(p.pos, Some(r), "ahlfors", &e),
                Ok(v) => Row::at(p.pos, r, "ahlfors", v, (c.lower..=c.upper).contains(&v)),
            })
            .collect::<Vec<_>>()
    });
    let mut rows: Vec<Row> = per_point.into_iter().flatten().collect();
    let pole = c.pole.or_else(|| default_pole(inp.u, &ctx.index));
    let mut band = None;
    match pole.map(|p| HarmonicMeasure::new(inp.u, p)) {
        None => rows.push(Row::new(None, None, "harmonic_measure", None, false).because("no interior pole")),
        Some(Err(e)) => rows.push(Row::new(None, None, "harmonic_measure", None, false).because(e.to_string())),
        Some(Ok(hm)) => {
            let n = ctx.points.len();
            let picks: Vec<usize> = if n <= c.hm_points {
                (0..n).collect()
            } else {
                (0..c.hm_points).map(|k| k * n / c.hm_points).collect()
            };
            let mut values = Vec::new();
            for &k in &picks {
                let z = ctx.points[k].pos;
                for &r in &c.hm_radii {
                    let v = Ball::disk(z, r).map(|b| hm.of_ball(&b) / r);
                    match v {
                        Ok(v) => {
                            values.push(v);
                            rows.push(
                                Row::at(z, r, "harmonic_measure", v, v > 0.0)
                                    .with("pole_x", hm.pole[0])
                                    .with("pole_y", hm.pole[1]),
                            );
                        }
                        Err(e) => rows.push(Row::failed(z, Some(r), "harmonic_measure", &e)),
                    }
                }
            }
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(0.0, f64::max);
            let ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            band = Some(ratio);
            rows.push(
                Row::new(None, None, "harmonic_band", Some(ratio), ratio <= c.hm_band)
                    .with("total_mass", hm.total()),
            );
        }
    }
    let mut report = Report::new(AuditKind::Ahlfors, rows);
    let vals: Vec<f64> = report.rows_of("ahlfors").filter_map(|r| r.value).collect();
    report.summary.insert("ratio_min".into(), vals.iter().copied().fold(f64::INFINITY, f64::min));
    report.summary.insert("ratio_max".into(), vals.iter().copied().fold(0.0, f64::max));
    if let Some(b) = band {
        report.summary.insert("harmonic_band".into(), b);
    }
    summarize_points(&mut report, ctx.points.len());
    report.pass = report.rows.iter().all(|r| r.pass);
    Ok(report)
}

/// `sup |h/u − 1|` over nodes of `B(x₀, r) ∩ {u > 0}` at distance at least
/// `r^{1+α/16}` from the boundary; `None` when no node qualifies.
pub fn replacement_ratio(
    u: &ScalarField,
    w: &WeightField,
    index: &BoundaryIndex,
    x0: Point,
    r: f64,
    alpha: f64,
) -> Result<Option<f64>> {
    let ball = Ball::disk(x0, r)?;
    let h = harmonic_replace(u, w, &ball)?;
    let g = u.grid();
    let threshold = r.powf(1.0 + alpha / 16.0);
    let (i0, i1) = g.node_range(0, x0[0] - r, x0[0] + r);
    let (j0, j1) = g.node_range(1, x0[1] - r, x0[1] + r);
    let mut sup: Option<f64> = None;
    for j in j0..=j1 {
        for i in i0..=i1 {
            let p = g.node2(i, j);
            let v = u.at2(i, j);
            if v > 0.0 && vec2::dist(p, x0) <= r && index.distance(p) >= threshold {
                let q = (h.at2(i, j) / v - 1.0).abs();
                sup = Some(sup.map_or(q, |s: f64| s.max(q)));
            }
        }
    }
    Ok(sup)
}

/// Random balls near the boundary: centre within `r/4` of a random point of
/// the boundary inside the audit region, radius uniform in `[r_min, r_max]`.
fn random_balls(ctx: &Ctx<'_>) -> Vec<(Point, f64)> {
    let c = &ctx.cfg.amin;
    let (lo, hi) = audit_region(ctx.input.u, ctx.cfg);
    let pool = audit_points(ctx.input.boundary, lo, hi, 1024);
    let grid = ctx.input.u.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut out = Vec::with_capacity(c.n_balls);
    if pool.is_empty() {
        return out;
    }
    let mut attempts = 0;
    while out.len() < c.n_balls && attempts < 100 * c.n_balls {
        attempts += 1;
        let base = pool[rng.gen_range(0..pool.len())].pos;
        let r = rng.gen_range(c.r_min..=c.r_max);
        let off = vec2::scale(vec2::from_angle(rng.gen_range(0.0..std::f64::consts::TAU)), rng.gen_range(0.0..0.25 * r));
        let x = vec2::add(base, off);
        if Ball::disk(x, r).is_ok_and(|b| grid.contains_ball(&b)) {
            out.push((x, r));
        }
    }
    out
}

fn amin_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.amin;
    let inp = ctx.input;
    let balls = random_balls(ctx);
    let mut rows: Vec<Row> = balls
        .par_iter()
        .map(|&(x, r)| match verify_almost_min(inp.u, inp.weights, &inp.almost_min, x, r, c.tau_disc) {
            Err(e) => Row::failed(x, Some(r), "almost_min", &e),
            Ok(rep) => {
                let row = Row::new(Some(x), Some(r), "almost_min", rep.defect, rep.pass)
                    .with("allowance", rep.allowance)
                    .with("j_u", rep.j_u)
                    .with("j_v", rep.j_v);
                if rep.degenerate {
                    row.because("degenerate ball: J(v) = 0")
                } else {
                    row
                }
            }
        })
        .collect();
    let rr = c.replacement_radius;
    let alpha = inp.almost_min.alpha;
    rows.extend(ctx.par_points(|_, p| match replacement_ratio(inp.u, inp.weights, &ctx.index, p.pos, rr, alpha) {
        Err(e) => Row::failed(p.pos, Some(rr), "replacement_ratio", &e),
        Ok(None) => Row::new(Some(p.pos), Some(rr), "replacement_ratio", None, true)
            .because("no node beyond the clearance threshold"),
        Ok(Some(v)) => Row::at(p.pos, rr, "replacement_ratio", v, v <= c.replacement_tol),
    }));
    let mut report = Report::new(AuditKind::Amin, rows);
    let frac = report.fraction("almost_min");
    report.summary.insert("pass_fraction".into(), frac);
    report.summary.insert("kappa".into(), inp.almost_min.kappa);
    report.summary.insert("balls".into(), balls.len() as f64);
    summarize_points(&mut report, ctx.points.len());
    report.pass = balls.len() == c.n_balls && frac >= c.min_pass_fraction && report.all("replacement_ratio");
    Ok(report)
}

fn classify_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.classify;
    let inp = ctx.input;
    let ladder = match density_ladder(c.r_max, ctx.h) {
        Ok(l) => l,
        Err(e) => return Ok(unresolved(AuditKind::Classify, "gap_ratio", &e)),
    };
    let alpha = inp.almost_min.alpha;
    let per_point = ctx.par_points(|i, p| {
        let mut rows = Vec::new();
        let z = Vertex { pos: p.pos, normal: p.normal };
        let q = inp.weights.q_plus_at(&p.pos).unwrap_or(f64::NAN);
        rows.push(match classify_point(inp.u, inp.weights, p.pos, &ladder, alpha, &c.params) {
            Err(e) => Row::failed(p.pos, None, "gap_ratio", &e),
            Ok(cl) => Row::new(Some(p.pos), None, "gap_ratio", Some(cl.gap_ratio), cl.label == Label::Regular)
                .with("w0", cl.w0)
                .with("fit_residual", cl.fit.residual)
                .with("two_phase", cl.two_phase as u8 as f64),
        });
        let nd = normal_derivative(inp.u, &z);
        rows.push(match &nd {
            Err(e) => Row::failed(p.pos, None, "normal_derivative", e),
            Ok(d) => {
                let v = d / q;
                Row::new(Some(p.pos), None, "normal_derivative", Some(v), (v - 1.0).abs() <= c.normal_tol)
            }
        });
        let rb = c.blowup_radius;
        rows.push(match (blowup_fit(inp.u, inp.weights, p.pos, rb), &nd) {
            (Err(e), _) => Row::failed(p.pos, Some(rb), "blowup", &e),
            (Ok(b), Ok(d)) => {
                let consistency = b.slope / d - 1.0;
                Row::at(p.pos, rb, "blowup", b.misfit, consistency.abs() <= c.slope_consistency)
                    .with("slope", b.slope)
                    .with("nx", b.normal[0])
                    .with("ny", b.normal[1])
                    .with("slope_vs_normal_derivative", consistency)
            }
            (Ok(b), Err(_)) => Row::at(p.pos, rb, "blowup", b.misfit, false).because("normal derivative unavailable"),
        });
        let rr = c.replacement_radius;
        match Ball::disk(p.pos, rr).and_then(|ball| Ok((harmonic_replace(inp.u, inp.weights, &ball)?, ball))) {
            Err(e) => {
                rows.push(Row::failed(p.pos, Some(rr), "replacement_normal_derivative", &e));
                rows.push(Row::failed(p.pos, Some(rr), "weak_identity", &e));
            }
            Ok((h, ball)) => {
                rows.push(match normal_derivative(&h, &z) {
                    Err(e) => Row::failed(p.pos, Some(rr), "replacement_normal_derivative", &e),
                    Ok(d) => {
                        let v = d / q;
                        Row::at(p.pos, rr, "replacement_normal_derivative", v, (v - 1.0).abs() <= c.replacement_normal_tol)
                    }
                });
                rows.push(match weak_identity_check(&h, inp.boundary, &ball, c.weak_trials, c.seed + i as u64) {
                    Err(e) => Row::failed(p.pos, Some(rr), "weak_identity", &e),
                    Ok(w) => Row::at(p.pos, rr, "weak_identity", w.median_residual, w.median_residual <= c.weak_tol),
                });
            }
        }
        rows
    });
    let mut report = Report::new(AuditKind::Classify, per_point.into_iter().flatten().collect());
    let nd_frac = report.fraction("normal_derivative");
    report.summary.insert("normal_derivative_fraction".into(), nd_frac);
    report.summary.insert("regular_fraction".into(), report.fraction("gap_ratio"));
    summarize_points(&mut report, ctx.points.len());
    report.pass = report.all("gap_ratio")
        && nd_frac >= c.normal_min_fraction
        && report.all("blowup")
        && report.all("replacement_normal_derivative")
        && report.all("weak_identity");
    Ok(report)
}

fn decay_report(ctx: &Ctx<'_>) -> Result<Report> {
    let c = &ctx.cfg.decay;
    let inp = ctx.input;
    let per_point = ctx.par_points(|_, p| match decay_audit(inp.u, inp.weights, inp.boundary, p.pos, &c.params) {
        Err(e) => vec![Row::failed(p.pos, None, "decay", &e)],
        Ok(d) => {
            let mut rows: Vec<Row> = d
                .rows
                .iter()
                .map(|row| {
                    let r = Row::at(p.pos, row.r, "sigma", row.sigma, true)
                        .with("floor", row.floor)
                        .with("ex", row.direction[0])
                        .with("ey", row.direction[1]);
                    if row.above_floor {
                        r
                    } else {
                        r.because("at resolution floor")
                    }
                })
                .collect();
            rows.extend(d.steps.iter().map(|s| {
                Row::at(p.pos, s.r, "improvement", s.sigma_next, s.pass)
                    .with("r_next", s.r_next)
                    .with("bound", s.bound)
                    .with("drift", s.drift)
                    .with("above_floor", s.above_floor as u8 as f64)
            }));
            if d.truncated {
                let r_last = d.rows.last().map_or(c.params.r0, |r| r.r * c.params.eta);
                rows.push(Row::new(Some(p.pos), Some(r_last), "truncated", None, true).because("ladder reached the resolution limit"));
            }
            let rate = Row::new(Some(p.pos), None, "alpha_tilde", d.alpha_tilde, d.rate_pass());
            rows.push(if d.flat_at_resolution { rate.because("flat at resolution") } else { rate });
            rows.push(Row::new(Some(p.pos), None, "drift_constant", Some(d.c_drift), d.c_drift <= c.params.c_max));
            rows
        }
    });
    let mut report = Report::new(AuditKind::Decay, per_point.into_iter().flatten().collect());
    let (n_above, n_pass) = report
        .rows_of("improvement")
        .filter(|r| r.detail.get("above_floor").copied() == Some(1.0))
        .fold((0usize, 0usize), |(n, ok), r| (n + 1, ok + r.pass as usize));
    let frac = if n_above == 0 { 1.0 } else { n_pass as f64 / n_above as f64 };
    report.summary.insert("improvement_fraction".into(), frac);
    report.summary.insert("steps_above_floor".into(), n_above as f64);
    let c_max = report.rows_of("drift_constant").filter_map(|r| r.value).fold(0.0, f64::max);
    report.summary.insert("drift_constant_max".into(), c_max);
    summarize_points(&mut report, ctx.points.len());
    report.pass = frac >= c.min_pass_fraction
        && report.all("alpha_tilde")
        && report.all("drift_constant")
        && report.rows_of("decay").next().is_none();
    Ok(report)
}

/// Runs one audit.
pub fn run_audit(input: &AuditInput<'_>, kind: AuditKind, cfg: &AuditConfig) -> Result<Report> {
    cfg.validate()?;
    let ctx = Ctx::new(input, cfg)?;
    match kind {
        AuditKind::Weiss => weiss_report(&ctx),
        AuditKind::Acf => acf_report(&ctx),
        AuditKind::Nta => nta_report(&ctx),
        AuditKind::Ahlfors => ahlfors_report(&ctx),
        AuditKind::Amin => amin_report(&ctx),
        AuditKind::Classify => classify_report(&ctx),
        AuditKind::Decay => decay_report(&ctx),
    }
}

/// Audits a run directory, writing `<kind>.json` and `<kind>.csv` per audit
/// and a manifest into `out_dir`.
pub fn audit_run(run_dir: &Path, kinds: &[AuditKind], out_dir: &Path, config: &Config) -> Result<RunManifest> {
    let run = load_run(run_dir)?;
    let input = AuditInput { u: &run.u, boundary: &run.boundary, weights: &run.weights, almost_min: run.meta.almost_min };
    let mut out = ManifestBuilder::new(out_dir)?;
    out.stage("load");
    for &kind in kinds {
        let report = run_audit(&input, kind, &config.audit)?;
        out.write(&format!("{}.json", kind.name()), report.to_json().as_bytes())?;
        out.write(&format!("{}.csv", kind.name()), report.to_csv().as_bytes())?;
        out.stage(kind.name());
    }
    out.finish(run.manifest.spec_sha256.clone(), config.sha256(), run.manifest.seed)
}
