//! Run outputs: `report.json` (results plus provenance), CSV tables and SVG
//! figures, all written deterministically.
//!
//! `report.json` fields: `task`, `seed`, `crate_version`, `config` (the
//! resolved config as TOML text), `result` (task specific), `tables` and
//! `figures` (file names written alongside).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub name: String,
    pub svg: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub seed: u64,
    pub crate_version: String,
    pub config: String,
    pub result: serde_json::Value,
    pub tables: Vec<String>,
    pub figures: Vec<String>,
}

/// Text of an optional number for tables; empty when absent.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_format = |e: csv::Error| Error::Format {
        what: "csv",
        reason: e.to_string(),
    };
    w.write_record(&table.header).map_err(to_format)?;
    for row in &table.rows {
        w.write_record(row).map_err(to_format)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "csv",
        reason: e.to_string(),
    })?;
    write(path, &bytes)
}

/// Write `report.json`, one CSV per table and one SVG per figure into
/// `dir`. Returns the paths written.
pub fn emit_report(
    dir: &Path,
    task: &str,
    seed: u64,
    config_toml: &str,
    result: serde_json::Value,
    tables: &[Table],
    figures: &[Figure],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        write_csv(&path, t)?;
        written.push(path);
    }
    for f in figures {
        let path = dir.join(format!("{}.svg", f.name));
        write(&path, f.svg.as_bytes())?;
        written.push(path);
    }
    let report = RunReport {
        task: task.into(),
        seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: config_toml.into(),
        result,
        tables: tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
        figures: figures.iter().map(|f| format!("{}.svg", f.name)).collect(),
    };
    let path = dir.join("report.json");
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| Error::Format {
        what: "report",
        reason: e.to_string(),
    })?;
    bytes.push(b'\n');
    write(&path, &bytes)?;
    written.push(path);
    Ok(written)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "report",
        reason: e.to_string(),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Blue-to-yellow colour for `v` in `[0, 1]`.
fn colour(v: f64) -> String {
    let v = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = (40.0 + 215.0 * v) as u8;
    let g = (60.0 + 170.0 * v) as u8;
    let b = (140.0 - 100.0 * v) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of `values[row][col]`; missing cells are grey. Values are
/// mapped linearly from `range` onto the colour scale.
pub fn heatmap_svg(
    title: &str,
    rows: &[String],
    cols: &[String],
    values: &[Vec<Option<f64>>],
    range: (f64, f64),
) -> String {
    let cell = 36.0;
    let (left, top) = (70.0, 40.0);
    let width = left + cell * cols.len() as f64 + 20.0;
    let height = top + cell * rows.len() as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let span = (range.1 - range.0).abs().max(f64::MIN_POSITIVE);
    for (i, row) in rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell / 2.0 + 4.0,
            escape(row)
        );
        for (j, _) in cols.iter().enumerate() {
            let x = left + cell * j as f64;
            let v = values.get(i).and_then(|r| r.get(j)).copied().flatten();
            let fill = v.map_or_else(|| "#bbbbbb".to_string(), |v| colour((v - range.0) / span));
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"/>"#
            );
            if let Some(v) = v {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{v:.2}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 3.0
                );
            }
        }
    }
    for (j, col) in cols.iter().enumerate() {
        let x = left + cell * j as f64 + cell / 2.0;
        let y = top + cell * rows.len() as f64 + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="middle">{}</text>"#,
            escape(col)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline of `values` against their index.
pub fn curve_svg(title: &str, values: &[f64]) -> String {
    let (w, h, pad) = (480.0, 240.0, 36.0);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let mut points = String::new();
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
        let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#2060c0" stroke-width="1.5" points="{}"/>"##,
        points.trim_end()
    );
    if lo.is_finite() {
        let _ = writeln!(s, r#"<text x="4" y="{}">{lo:.4}</text>"#, h - pad);
        let _ = writeln!(s, r#"<text x="4" y="{}">{hi:.4}</text>"#, pad);
    }
    s.push_str("</svg>\n");
    s
}
