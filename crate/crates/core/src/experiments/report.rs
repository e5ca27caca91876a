//! Report container and its JSON, CSV and SVG renderings.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const REPORT_VERSION: u32 = 1;

/// CSV header; the column order is part of the report contract.
pub const CSV_COLUMNS: [&str; 4] = ["experiment", "labels", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub labels: BTreeMap<String, String>,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(labels: &[(&str, String)], metric: &str, value: f64) -> Self {
        Self {
            labels: labels.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect(),
            metric: metric.to_owned(),
            value,
        }
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    /// `k=v` pairs joined with `;` in key order.
    pub fn label_string(&self) -> String {
        self.labels
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub toolkit_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub report_version: u32,
    pub experiment: String,
    /// Everything needed to re-run the experiment.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    /// Published values for the same protocol, for context only.
    pub paper_reference: Vec<ReportRow>,
    pub fingerprint: Fingerprint,
    pub train_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
}

impl ExperimentReport {
    pub fn validate(&self) -> Result<()> {
        if self.report_version != REPORT_VERSION {
            return Err(Error::format(
                "report",
                format!("unsupported report_version {}", self.report_version),
            ));
        }
        if let Some(r) = self.rows.iter().find(|r| !r.value.is_finite()) {
            return Err(Error::format(
                "report",
                format!("non-finite {} at {}", r.metric, r.label_string()),
            ));
        }
        Ok(())
    }

    pub fn rows_with<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    /// First row whose metric matches and whose labels include every `(key, value)`.
    pub fn find(&self, metric: &str, labels: &[(&str, &str)]) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && labels.iter().all(|(k, v)| r.label(k) == Some(v)))
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| Error::format("report", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::format("report", e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::format("report", e.to_string());
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                self.experiment.as_str(),
                &r.label_string(),
                &r.metric,
                &r.value.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("report", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    /// Bar chart of the MSE rows, or a line chart when every row carries a numeric `x` label.
    pub fn to_svg(&self) -> String {
        let rows: Vec<&ReportRow> = self.rows_with("mse").collect();
        let rows = if rows.is_empty() {
            self.rows.iter().collect()
        } else {
            rows
        };
        let (w, h, margin) = (720.0, 360.0, 48.0);
        let max = rows.iter().map(|r| r.value).fold(0.0_f64, f64::max);
        let max = if max > 0.0 { max } else { 1.0 };
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{margin}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
            escape(&self.experiment)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{margin}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
            y = h - margin,
            x2 = w - margin / 2.0
        );
        let plot_h = h - 2.0 * margin;
        let slot = (w - 1.5 * margin) / rows.len().max(1) as f64;
        for (i, r) in rows.iter().enumerate() {
            let bar = (r.value / max).max(0.0) * plot_h;
            let x = margin + i as f64 * slot;
            let _ = writeln!(
                svg,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{bw:.2}" height="{bar:.2}" fill="#4a78b0"><title>{t}: {v}</title></rect>"##,
                y = h - margin - bar,
                bw = slot * 0.8,
                t = escape(&r.label_string()),
                v = r.value
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{y}" font-family="sans-serif" font-size="10">{max:.4e}</text>"#,
            y = margin
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `<experiment>.json`, `.csv` and `.svg` under `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = dir.join(&report.experiment);
    let paths = [
        base.with_extension("json"),
        base.with_extension("csv"),
        base.with_extension("svg"),
    ];
    let contents = [report.to_json()?, report.to_csv()?, report.to_svg()];
    for (p, c) in paths.iter().zip(contents) {
        fs::write(p, c).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentReport::from_json(&s)
}
