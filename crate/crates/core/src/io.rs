//! On-disk formats.
//!
//! A field `<name>` is stored as a JSON header `<name>.json` next to a raw
//! little-endian `f64` raster `<name>.raw` (first axis fastest). Free
//! boundaries are CSV files with the header `polyline,x,y,nx,ny`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};
use crate::geometry::{FreeBoundary, Polyline, Vertex};

pub const FIELD_SCHEMA: &str = "fblab.field.v1";
pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub schema: String,
    pub rank: usize,
    pub dims: Vec<usize>,
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub dtype: String,
}

impl FieldHeader {
    pub fn for_grid(grid: &Grid) -> Self {
        Self {
            schema: FIELD_SCHEMA.to_string(),
            rank: grid.rank(),
            dims: grid.dims().to_vec(),
            origin: grid.origin().to_vec(),
            spacing: grid.spacing(),
            dtype: DTYPE.to_string(),
        }
    }

    /// Parses and validates a header.
    pub fn parse(text: &str) -> Result<Self> {
        let header: FieldHeader = parse_json(text)?;
        if header.schema != FIELD_SCHEMA {
            return Err(Error::Format(format!("unsupported field schema `{}`", header.schema)));
        }
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.rank != header.dims.len() {
            return Err(Error::Format(format!(
                "rank {} disagrees with {} dims",
                header.rank,
                header.dims.len()
            )));
        }
        header.grid()?;
        Ok(header)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.origin.clone(), self.spacing, self.dims.clone())
    }
}

/// Deserializes JSON, naming the offending key on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

pub fn encode_raster(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a raster for `header`, rejecting short, long or non-finite data.
pub fn decode_raster(header: &FieldHeader, bytes: &[u8]) -> Result<ScalarField> {
    let grid = header.grid()?;
    let expected = grid
        .len()
        .checked_mul(8)
        .ok_or_else(|| Error::Format("raster size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "raster has {} bytes, header requires {expected}",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ScalarField::new(grid, values).map_err(|e| Error::Format(e.to_string()))
}

fn sidecars(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.raw")))
}

/// Writes `<name>.json` and `<name>.raw`; returns both paths.
pub fn write_field(dir: &Path, name: &str, field: &ScalarField) -> Result<[PathBuf; 2]> {
    let (json, raw) = sidecars(dir, name);
    fs::write(&json, to_json_pretty(&FieldHeader::for_grid(field.grid())))?;
    fs::write(&raw, encode_raster(field.values()))?;
    Ok([json, raw])
}

/// Reads a field given either `<dir>/<name>` or a path to its `.json`/`.raw`.
pub fn read_field(path: &Path) -> Result<ScalarField> {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let json = stem.with_extension("json");
    let raw = stem.with_extension("raw");
    let header = FieldHeader::parse(&fs::read_to_string(&json)?)?;
    decode_raster(&header, &fs::read(&raw)?)
}

/// 8-bit binary PGM, min-max scaled, top row = largest second coordinate.
pub fn encode_pgm(field: &ScalarField) -> Result<Vec<u8>> {
    let g = field.grid();
    if g.rank() != 2 {
        return Err(Error::param("PGM export needs a rank-2 field"));
    }
    let (lo, hi) = (field.min(), field.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", g.nx(), g.ny()).into_bytes();
    for j in (0..g.ny()).rev() {
        for i in 0..g.nx() {
            let v = (field.at2(i, j) - lo) / span;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn boundary_to_csv(fb: &FreeBoundary) -> String {
    let mut s = String::from("polyline,x,y,nx,ny\n");
    for (id, line) in fb.polylines.iter().enumerate() {
        for v in &line.vertices {
            let _ = writeln!(
                s,
                "{id},{:.17e},{:.17e},{:.17e},{:.17e}",
                v.pos[0], v.pos[1], v.normal[0], v.normal[1]
            );
        }
    }
    s
}

/// Parses the boundary CSV. A polyline is closed when its first and last
/// vertices coincide.
pub fn boundary_from_csv(text: &str) -> Result<FreeBoundary> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let expected = ["polyline", "x", "y", "nx", "ny"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(a, b)| a.trim() != b) {
        return Err(Error::Format(format!("unexpected boundary header {headers:?}")));
    }
    let mut polylines: Vec<Polyline> = Vec::new();
    let mut current: Option<usize> = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("row {}: {e}", line + 2)))?;
        let field = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad `{}` value", line + 2, expected[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Format(format!("row {}: non-finite `{}`", line + 2, expected[k])))
            }
        };
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad polyline id", line + 2)))?;
        match current {
            Some(c) if c == id => {}
            Some(c) if id == c + 1 => {
                polylines.push(Polyline::default());
                current = Some(id);
            }
            None if id == 0 => {
                polylines.push(Polyline::default());
                current = Some(0);
            }
            _ => {
                return Err(Error::Format(format!(
                    "row {}: polyline ids must be contiguous from 0",
                    line + 2
                )))
            }
        }
        let normal = [field(3)?, field(4)?];
        let norm = normal[0].hypot(normal[1]);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("row {}: normal is not unit length", line + 2)));
        }
        polylines
            .last_mut()
            .expect("polyline pushed")
            .vertices
            .push(Vertex { pos: [field(1)?, field(2)?], normal });
    }
    for p in &mut polylines {
        let n = p.vertices.len();
        p.closed = n > 2 && p.vertices[0].pos == p.vertices[n - 1].pos;
    }
    Ok(FreeBoundary { polylines })
}
