//! Run directories: solving a problem spec into a self-contained directory,
//! checksummed manifests, and loading a run back for audits.
//!
//! A solved run holds `spec.json`, `u.{json,raw}`, `q_plus.{json,raw}`,
//! `q_minus.{json,raw}`, `weights.json`, `boundary.csv`, `trace.csv`,
//! `result.json` and, written last, `manifest.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::AuditConfig;
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::{extract_boundary, FreeBoundary};
use crate::io::{boundary_from_csv, boundary_to_csv, parse_json, read_field, to_json_pretty, write_field};
use crate::problem::{AlmostMinParams, Phase, ProblemSpec, WeightField};
use crate::solver::{minimize, SolveConfig, StageSummary};

pub const MANIFEST_SCHEMA: &str = "fblab.manifest.v1";
pub const RESULT_SCHEMA: &str = "fblab.result.v1";
pub const WEIGHTS_SCHEMA: &str = "fblab.weights.v1";
pub const CONFIG_SCHEMA: &str = "fblab.config.v1";
pub const TOOL_VERSION: &str = concat!("fblab ", env!("CARGO_PKG_VERSION"));

/// Combined solver and audit configuration read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema: String,
    pub solve: SolveConfig,
    pub audit: AuditConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self { schema: CONFIG_SCHEMA.into(), solve: SolveConfig::default(), audit: AuditConfig::default() }
    }
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Config = parse_json(text)?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(Error::Json {
                path: "schema".into(),
                message: format!("expected `{CONFIG_SCHEMA}`, got `{}`", cfg.schema),
            });
        }
        cfg.solve.validate()?;
        cfg.audit.validate()?;
        Ok(cfg)
    }

    /// Checksum of the canonical serialization.
    pub fn sha256(&self) -> String {
        sha256_hex(to_json_pretty(self).as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTime {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub spec_sha256: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<StageTime>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: RunManifest = parse_json(text)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("unsupported manifest schema `{}`", m.schema)));
        }
        Ok(m)
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

/// Collects artifacts and stage timings while a directory is written.
pub(crate) struct ManifestBuilder {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    stages: Vec<StageTime>,
    clock: Instant,
}

impl ManifestBuilder {
    pub(crate) fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new(), stages: Vec::new(), clock: Instant::now() })
    }

    pub(crate) fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.push(Artifact { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    }

    pub(crate) fn write_field(&mut self, name: &str, field: &ScalarField) -> Result<()> {
        for path in write_field(&self.dir, name, field)? {
            let bytes = fs::read(&path)?;
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or(name).to_string();
            self.record(&file, &bytes);
        }
        Ok(())
    }

    /// Closes the running stage clock.
    pub(crate) fn stage(&mut self, name: &str) {
        self.stages.push(StageTime { name: name.into(), seconds: self.clock.elapsed().as_secs_f64() });
        self.clock = Instant::now();
    }

    pub(crate) fn finish(self, spec_sha256: String, config_sha256: String, seed: Option<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: TOOL_VERSION.into(),
            spec_sha256,
            config_sha256,
            seed,
            artifacts: self.artifacts,
            stages: self.stages,
        };
        fs::write(self.dir.join("manifest.json"), to_json_pretty(&manifest))?;
        Ok(manifest)
    }
}

/// Metadata of the weights a run is audited against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsMeta {
    pub schema: String,
    pub phase: Phase,
    pub c0: f64,
    pub alpha: f64,
    pub holder_seminorm: f64,
    /// Almost-minimality constants expected of the stored solution.
    pub almost_min: AlmostMinParams,
    pub q_plus: String,
    pub q_minus: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultSummary {
    pub schema: String,
    pub converged: bool,
    pub iterations: usize,
    pub sharp_energy: f64,
    pub boundary_length: f64,
    pub stages: Vec<StageSummary>,
}

fn trace_csv(trace: &[crate::solver::TraceEntry]) -> String {
    let mut s = String::from("level,stage,eps,iteration,energy\n");
    for t in trace {
        let _ = writeln!(s, "{},{},{:.17e},{},{:.17e}", t.level, t.stage, t.eps, t.iteration, t.energy);
    }
    s
}

/// Parses, validates and solves `spec_path`, writing a run directory.
pub fn solve_run(spec_path: &Path, out_dir: &Path, config: &Config) -> Result<RunManifest> {
    let text = read_input(spec_path)?;
    let spec = ProblemSpec::from_json_str(&text)?;
    config.solve.validate()?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let problem = spec.build(base)?;
    let mut out = ManifestBuilder::new(out_dir)?;
    out.write("spec.json", text.as_bytes())?;
    out.stage("setup");

    let result = minimize(&problem, &config.solve)?;
    out.stage("solve");

    let fb = extract_boundary(&result.u)?;
    out.write_field("u", &result.u)?;
    out.write_field("q_plus", &problem.weights.q_plus)?;
    out.write_field("q_minus", &problem.weights.q_minus)?;
    let w = &problem.weights;
    let meta = WeightsMeta {
        schema: WEIGHTS_SCHEMA.into(),
        phase: problem.phase,
        c0: w.c0,
        alpha: w.alpha,
        holder_seminorm: w.holder_seminorm,
        almost_min: problem.almost_min_params(),
        q_plus: "q_plus".into(),
        q_minus: "q_minus".into(),
    };
    out.write("weights.json", to_json_pretty(&meta).as_bytes())?;
    out.write("boundary.csv", boundary_to_csv(&fb).as_bytes())?;
    out.write("trace.csv", trace_csv(&result.energy_trace).as_bytes())?;
    let summary = ResultSummary {
        schema: RESULT_SCHEMA.into(),
        converged: result.converged,
        iterations: result.iterations,
        sharp_energy: result.sharp_energy,
        boundary_length: fb.length(),
        stages: result.stages,
    };
    out.write("result.json", to_json_pretty(&summary).as_bytes())?;
    out.stage("write");
    let seed = spec.perturbation.as_ref().map(|p| p.seed);
    out.finish(sha256_hex(text.as_bytes()), config.sha256(), seed)
}

/// Reads an input file; absence is an input error rather than a missing artifact.
fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parameter(format!("cannot read {}: {e}", path.display())))
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Missing(p.display().to_string()))
    }
}

/// Reads a weight set from its metadata file and sidecar fields.
pub fn read_weights(meta_path: &Path) -> Result<(WeightField, WeightsMeta)> {
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let meta: WeightsMeta = parse_json(&fs::read_to_string(meta_path)?)?;
    if meta.schema != WEIGHTS_SCHEMA {
        return Err(Error::Format(format!("unsupported weights schema `{}`", meta.schema)));
    }
    for name in [&meta.q_plus, &meta.q_minus] {
        require(dir, &format!("{name}.json"))?;
        require(dir, &format!("{name}.raw"))?;
    }
    let q_plus = read_field(&dir.join(&meta.q_plus))?;
    let q_minus = read_field(&dir.join(&meta.q_minus))?;
    let w = WeightField::new(q_plus, q_minus, meta.c0, meta.alpha, meta.holder_seminorm)?;
    Ok((w, meta))
}

/// A solved run loaded for auditing.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub u: ScalarField,
    pub boundary: FreeBoundary,
    pub weights: WeightField,
    pub meta: WeightsMeta,
}

pub fn load_run(dir: &Path) -> Result<Run> {
    let manifest = RunManifest::parse(&fs::read_to_string(require(dir, "manifest.json")?)?)?;
    for a in &manifest.artifacts {
        require(dir, &a.path)?;
    }
    for name in ["u.json", "u.raw", "boundary.csv", "weights.json"] {
        require(dir, name)?;
    }
    let u = read_field(&dir.join("u"))?;
    let boundary = boundary_from_csv(&fs::read_to_string(dir.join("boundary.csv"))?)?;
    let (weights, meta) = read_weights(&dir.join("weights.json"))?;
    if weights.grid() != u.grid() {
        return Err(Error::Format("weights and solution live on different grids".into()));
    }
    Ok(Run { dir: dir.to_path_buf(), manifest, u, boundary, weights, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_rejections() {
        let cfg = Config::default();
        let text = to_json_pretty(&cfg);
        assert_eq!(Config::from_json_str(&text).unwrap(), cfg);
        assert_eq!(Config::from_json_str(&text).unwrap().sha256(), cfg.sha256());
        assert_eq!(Config::from_json_str(r#"{"schema":"fblab.config.v1"}"#).unwrap(), cfg);
        assert!(matches!(Config::from_json_str(r#"{"schema":"other"}"#), Err(Error::Json { .. })));
        match Config::from_json_str(r#"{"schema":"fblab.config.v1","audit":{"n_points":"x"}}"#) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "audit.n_points"),
            other => panic!("{other:?}"),
        }
        assert!(Config::from_json_str(r#"{"schema":"fblab.config.v1","solver":{}}"#).is_err());
        assert!(Config::from_json_str(r#"{"schema":"fblab.config.v1","audit":{"margin_fraction":0.7}}"#).is_err());
    }

    #[test]
    fn manifest_schema_is_checked() {
        let m = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: TOOL_VERSION.into(),
            spec_sha256: sha256_hex(b"spec"),
            config_sha256: sha256_hex(b""),
            seed: Some(3),
            artifacts: vec![Artifact { path: "u.raw".into(), sha256: sha256_hex(b"x"), bytes: 1 }],
            stages: vec![],
        };
        let text = to_json_pretty(&m);
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
        assert!(m.artifact("u.raw").is_some() && m.artifact("v.raw").is_none());
        assert!(RunManifest::parse(&text.replace(MANIFEST_SCHEMA, "fblab.manifest.v0")).is_err());
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
