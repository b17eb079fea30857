//! Table and plot emitters. Machine-readable artifacts keep full precision;
//! display tables round to one decimal. Plots are static SVG files emitted
//! next to the data they chart.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// A rendered-ready matrix of AUROC-like values, the shared shape of the
/// ablation, benchmark, and years artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixArtifact {
    pub title: String,
    pub row_label: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `values[row][col]`; `None` marks a failed or missing cell.
    pub values: Vec<Vec<Option<f64>>>,
    /// Cells to highlight (e.g. in-dataset entries), as (row, col).
    pub highlights: Vec<(usize, usize)>,
}

impl MatrixArtifact {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        out.push_str(&csv_row(
            std::iter::once(self.row_label.as_str()).chain(self.columns.iter().map(|c| c.as_str())),
        ));
        for (row_name, row) in self.rows.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or(String::new(), |x| format!("{x}")))
                .collect();
            out.push_str(&csv_row(
                std::iter::once(row_name.as_str()).chain(cells.iter().map(|c| c.as_str())),
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Display form: AUROC in percent, one decimal, highlights starred.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = Vec::new();
        let mut header: Vec<String> = vec![self.row_label.clone()];
        header.extend(self.columns.iter().cloned());
        let mut body: Vec<Vec<String>> = Vec::new();
        for (r, row_name) in self.rows.iter().enumerate() {
            let mut cells = vec![row_name.clone()];
            for (c, v) in self.values[r].iter().enumerate() {
                let mark = if self.highlights.contains(&(r, c)) { "*" } else { "" };
                cells.push(match v {
                    Some(x) => format!("{:.1}{mark}", x * 100.0),
                    None => format!("-{mark}"),
                });
            }
            body.push(cells);
        }
        for row in std::iter::once(&header).chain(body.iter()) {
            for (i, cell) in row.iter().enumerate() {
                if widths.len() <= i {
                    widths.push(0);
                }
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.title);
        let fmt_row = |cells: &[String], widths: &[usize]| -> String {
            let mut line = String::new();
            for (i, cell) in cells.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                let _ = write!(line, "{:>width$}", cell, width = widths[i]);
            }
            line
        };
        let _ = writeln!(out, "{}", fmt_row(&header, &widths));
        for row in &body {
            let _ = writeln!(out, "{}", fmt_row(row, &widths));
        }
        out
    }
}

fn csv_row<'a>(cells: impl Iterator<Item = &'a str>) -> String {
    let mut line = String::new();
    for (i, cell) in cells.enumerate() {
        if i > 0 {
            line.push(',');
        }
        if cell.contains(',') || cell.contains('"') {
            line.push('"');
            line.push_str(&cell.replace('"', "\"\""));
            line.push('"');
        } else {
            line.push_str(cell);
        }
    }
    line.push('\n');
    line
}

/// One named series of y-values over shared x positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// Minimal static SVG line chart: series as polylines over categorical x
/// positions, optional highlighted points, y range fit to the data.
pub fn svg_line_chart(
    title: &str,
    x_labels: &[String],
    series: &[Series],
    highlights: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 150.0;
    const MT: f64 = 40.0;
    const MB: f64 = 60.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let n = x_labels.len().max(2);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for v in &s.values {
            if v.is_finite() {
                y_min = y_min.min(*v);
                y_max = y_max.max(*v);
            }
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    let pad = ((y_max - y_min) * 0.1).max(0.02);
    y_min -= pad;
    y_max += pad;

    let x_at = |i: usize| ML + (W - ML - MR) * i as f64 / (n - 1) as f64;
    let y_at = |v: f64| MT + (H - MT - MB) * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    // axes
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/>"#,
        H - MB
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MB,
        W - MR,
        H - MB
    );
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * f64::from(k) / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{:.2}</text>"#,
            ML - 6.0,
            y + 4.0,
            v
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{ML}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#dddddd"/>"##,
            W - MR
        );
    }
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            x_at(i),
            H - MB + 18.0,
            xml_escape(label)
        );
    }
    for (s_ix, s) in series.iter().enumerate() {
        let color = palette[s_ix % palette.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), y_at(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for (i, v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let highlighted = highlights.contains(&(s_ix, i));
            let r = if highlighted { 7.0 } else { 3.0 };
            let fill = if highlighted { "none" } else { color };
            let stroke_w = if highlighted { 2.5 } else { 1.0 };
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="{r}" fill="{fill}" stroke="{color}" stroke-width="{stroke_w}"/>"#,
                x_at(i),
                y_at(*v)
            );
        }
        let ly = MT + 18.0 * s_ix as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly:.1}" x2="{}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            W - MR + 10.0,
            W - MR + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            W - MR + 36.0,
            ly + 4.0,
            xml_escape(&s.name)
        );
    }
    let _ = writeln!(svg, "</svg>");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
