//! Text formats: an OBJ subset for meshes, XYZ for point clouds, plain
//! whitespace tables for skinning weights.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write followed by a read gives back the same bits.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use eqshape_core::data::{Mesh, PartWeights};
use eqshape_core::Vec3;

/// A malformed line, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, ParseError> {
    let v: f64 = tok.parse().map_err(|_| err(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(err(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn parse_xyz3<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec3, ParseError> {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = parse_f64(toks.next().ok_or_else(|| err(line, "expected three coordinates"))?, line)?;
    }
    if toks.next().is_some() {
        return Err(err(line, "expected exactly three coordinates"));
    }
    Ok(Vec3::new(c[0], c[1], c[2]))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn format_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// `v x y z` and `f i j k` lines with 1-based indices. Face entries may carry
/// `/vt/vn` suffixes, which are ignored. Other record types are skipped.
pub fn parse_obj(text: &str) -> Result<Mesh, ParseError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (line, l) in content_lines(text) {
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => vertices.push(parse_xyz3(toks, line)?),
            Some("f") => {
                let idx: Vec<&str> = toks.collect();
                if idx.len() != 3 {
                    return Err(err(line, format!("faces must be triangles, got {} indices", idx.len())));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&idx) {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: usize = head.parse().map_err(|_| err(line, format!("bad face index {tok:?}")))?;
                    if i == 0 {
                        return Err(err(line, "face indices are 1-based"));
                    }
                    *slot = i - 1;
                }
                faces.push(f);
                face_lines.push(line);
            }
            _ => {}
        }
    }
    for (f, line) in faces.iter().zip(face_lines) {
        if f.iter().any(|&i| i >= vertices.len()) {
            return Err(err(line, format!("face index out of range ({} vertices)", vertices.len())));
        }
    }
    Ok(Mesh { vertices, faces })
}

pub fn format_xyz(points: &[Vec3]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_xyz(text: &str) -> Result<Vec<Vec3>, ParseError> {
    content_lines(text).map(|(line, l)| parse_xyz3(l.split_whitespace(), line)).collect()
}

pub fn format_weights(w: &PartWeights) -> String {
    let mut s = String::new();
    for row in w.data().chunks(w.k()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

pub fn parse_weights(text: &str) -> Result<PartWeights> {
    let mut data = Vec::new();
    let mut k = None;
    let mut n = 0;
    for (line, l) in content_lines(text) {
        let row = l.split_whitespace().map(|t| parse_f64(t, line)).collect::<Result<Vec<f64>, _>>()?;
        match k {
            None => k = Some(row.len()),
            Some(k) if k != row.len() => return Err(err(line, format!("expected {k} weights, got {}", row.len())).into()),
            _ => {}
        }
        data.extend(row);
        n += 1;
    }
    Ok(PartWeights::new(n, k.unwrap_or(0), data)?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    write(path, &format_obj(mesh))
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    parse_xyz(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<()> {
    write(path, &format_xyz(points))
}

pub fn read_weights(path: &Path) -> Result<PartWeights> {
    parse_weights(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_weights(path: &Path, w: &PartWeights) -> Result<()> {
    write(path, &format_weights(w))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    read(path)
}
