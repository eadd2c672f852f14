//! Plain-text data formats.
//!
//! * edges: `child<TAB>parent` per line
//! * features: `node_id<TAB>x_1<TAB>...<TAB>x_d`
//! * embeddings: `node_id<TAB>u_0<TAB>...<TAB>u_n` (Lorentz coordinates)
//! * splits manifest: JSON with identifier arrays per `(test_size, repetition)`
//! * loss traces: CSV `epoch,mean_loss`
//!
//! Blank lines and lines starting with `#` are skipped in every TSV file.
//! Floats are written in `{:.16e}`, which round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::embedding::{ClosureGraph, EmbeddingState};
use crate::error::{invalid_input, Error, Result};
use crate::manifold::LorentzPoint;

pub const MANIFEST_VERSION: u32 = 1;

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { location: format!("{source}:{line}"), message: message.into() }
}

/// Non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn fmt_row(out: &mut String, id: &str, values: &[f64]) {
    out.push_str(id);
    for v in values {
        let _ = write!(out, "\t{v:.16e}");
    }
    out.push('\n');
}

/// Parses `child<TAB>parent` pairs.
pub fn parse_edges(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    data_lines(text)
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [child, parent] if !child.trim().is_empty() && !parent.trim().is_empty() => {
                    Ok((child.trim().to_string(), parent.trim().to_string()))
                }
                _ => Err(parse_err(source, n, format!("expected 'child<TAB>parent', got {} column(s)", cols.len()))),
            }
        })
        .collect()
}

pub fn read_edges(path: &Path) -> Result<Vec<(String, String)>> {
    parse_edges(&read_text(path)?, &path.display().to_string())
}

/// Reads an edge list into a graph whose node order is first appearance.
pub fn read_graph(path: &Path) -> Result<ClosureGraph> {
    let pairs = read_edges(path)?;
    if pairs.is_empty() {
        return Err(invalid_input(format!("{} contains no edges", path.display())));
    }
    ClosureGraph::from_named_edges(&pairs)
}

pub fn write_edges(path: &Path, g: &ClosureGraph) -> Result<()> {
    let mut out = String::from("# child\tparent\n");
    for &(c, p) in g.edges() {
        let _ = writeln!(out, "{}\t{}", g.id(c), g.id(p));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses `id<TAB>v_1...` rows; every row must have the same width.
pub fn parse_rows(text: &str, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut width = None;
    let mut rows = Vec::new();
    for (n, line) in data_lines(text) {
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(parse_err(source, n, "missing node id"));
        }
        let values = cols
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(source, n, format!("bad number '{c}': {e}")))
                    .and_then(|v| if v.is_finite() { Ok(v) } else { Err(parse_err(source, n, "non-finite value")) })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(parse_err(source, n, "row has no values"));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(source, n, format!("expected {w} values, found {}", values.len())));
            }
            _ => {}
        }
        rows.push((id.to_string(), values));
    }
    Ok(rows)
}

pub fn read_features(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    parse_rows(&read_text(path)?, &path.display().to_string())
}

pub fn write_features<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Result<()> {
    let mut out = String::new();
    for (id, x) in rows {
        fmt_row(&mut out, id, x);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads Lorentz points, rejecting rows off the hyperboloid.
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, LorentzPoint)>> {
    let source = path.display().to_string();
    let rows = parse_rows(&read_text(path)?, &source)?;
    rows.into_iter()
        .enumerate()
        .map(|(k, (id, coords))| {
            LorentzPoint::new(coords)
                .map(|p| (id.clone(), p))
                .map_err(|e| parse_err(&source, k + 1, format!("row '{id}': {e}")))
        })
        .collect()
}

pub fn write_embeddings<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a LorentzPoint)>) -> Result<()> {
    let mut out = String::new();
    for (id, p) in rows {
        fmt_row(&mut out, id, p.coords());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_embedding_state(path: &Path, state: &EmbeddingState) -> Result<()> {
    let mut out = String::new();
    for (k, id) in state.node_ids().iter().enumerate() {
        fmt_row(&mut out, id, state.coords(k));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        let _ = writeln!(out, "{epoch},{loss:.16e}");
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub test_size: usize,
    pub repetition: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub version: u32,
    pub splits: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn from_splits(g: &ClosureGraph, splits: &[Split]) -> Self {
        let names = |idx: &[usize]| idx.iter().map(|&k| g.id(k).to_string()).collect();
        let splits = splits
            .iter()
            .map(|s| ManifestEntry {
                test_size: s.test_size,
                repetition: s.repetition,
                train: names(&s.train),
                validation: names(&s.validation),
                test: names(&s.test),
            })
            .collect();
        Self { version: MANIFEST_VERSION, splits }
    }

    /// Resolves identifiers back to node indices of `g`.
    pub fn to_splits(&self, g: &ClosureGraph) -> Result<Vec<Split>> {
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| g.index_of(id).ok_or_else(|| invalid_input(format!("manifest names unknown node '{id}'"))))
                .collect()
        };
        self.splits
            .iter()
            .map(|e| {
                Ok(Split {
                    test_size: e.test_size,
                    repetition: e.repetition,
                    train: resolve(&e.train)?,
                    validation: resolve(&e.validation)?,
                    test: resolve(&e.test)?,
                })
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_str(&read_text(path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(invalid_input(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(manifest)
    }
}
