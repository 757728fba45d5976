use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{Aggregate, EvalReport, ZERO_DENOMINATOR_NOTE};
use crate::error::{Error, Result};

/// The four configurations compared by an ablation, in table order.
pub const ABLATION_ROWS: [&str; 4] = [
    "teacher_alone",
    "student_alone",
    "student_from_teacher",
    "student_from_assistant",
];

/// One row evaluated under one seed. `report` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<SeedResult>,
}

impl AblationRow {
    /// Per-metric medians of micro aggregates over successful seeds. For an
    /// even count the two middle values are averaged.
    pub fn median(&self) -> Option<Aggregate> {
        let ok: Vec<Aggregate> = self
            .runs
            .iter()
            .filter_map(|r| r.report.as_ref().map(|e| e.micro))
            .collect();
        if ok.is_empty() {
            return None;
        }
        let med = |f: fn(&Aggregate) -> f64| {
            let mut v: Vec<f64> = ok.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        Some(Aggregate {
            precision: med(|a| a.precision),
            recall: med(|a| a.recall),
            f1: med(|a| a.f1),
        })
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.report.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub config_snapshot: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn median_f1(&self, name: &str) -> Option<f64> {
        self.row(name)?.median().map(|a| a.f1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Csv,
    JsonLines,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::TextTable => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "jsonl",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::TextTable => "text-table",
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "json-lines",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-table" | "text" => Ok(ReportFormat::TextTable),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            _ => Err(Error::Parameter(format!("unknown report format `{s}`"))),
        }
    }
}

fn fmt_ratio(v: f64) -> String {
    format!("{v:.6}")
}

fn render_table(report: &AblationReport) -> String {
    let mut out = format!("{:<24} {:>10} {:>10} {:>10}\n", "row", "precision", "recall", "f1");
    for row in &report.rows {
        match row.median() {
            Some(a) if !row.failed() => {
                out += &format!(
                    "{:<24} {:>10.4} {:>10.4} {:>10.4}\n",
                    row.name, a.precision, a.recall, a.f1
                );
            }
            _ => out += &format!("{:<24} {:>10} {:>10} {:>10}\n", row.name, "FAILED", "FAILED", "FAILED"),
        }
    }
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    out += &format!(
        "\nmedian of micro-averaged scores over seeds [{}], threshold {}\n{}\n",
        seeds.join(", "),
        report.threshold,
        ZERO_DENOMINATOR_NOTE
    );
    for row in &report.rows {
        for run in &row.runs {
            if let Some(err) = &run.error {
                out += &format!("{} seed {} failed: {}\n", row.name, run.seed, err);
            }
        }
    }
    out
}

fn render_csv(report: &AblationReport) -> String {
    let mut out = String::from("row,precision,recall,f1,threshold,seed\n");
    for row in &report.rows {
        for run in &row.runs {
            match &run.report {
                Some(r) => {
                    out += &format!(
                        "{},{},{},{},{},{}\n",
                        row.name,
                        fmt_ratio(r.micro.precision),
                        fmt_ratio(r.micro.recall),
                        fmt_ratio(r.micro.f1),
                        report.threshold,
                        run.seed
                    )
                }
                None => out += &format!("{},FAILED,FAILED,FAILED,{},{}\n", row.name, report.threshold, run.seed),
            }
        }
        match row.median() {
            Some(a) if !row.failed() => {
                out += &format!(
                    "{},{},{},{},{},median\n",
                    row.name,
                    fmt_ratio(a.precision),
                    fmt_ratio(a.recall),
                    fmt_ratio(a.f1),
                    report.threshold
                )
            }
            _ => out += &format!("{},FAILED,FAILED,FAILED,{},median\n", row.name, report.threshold),
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    threshold: f64,
    seeds: Vec<u64>,
    config_snapshot: String,
}

#[derive(Serialize, Deserialize)]
struct JsonRun {
    row: String,
    seed: u64,
    report: Option<EvalReport>,
    error: Option<String>,
}

fn render_json_lines(report: &AblationReport) -> String {
    let header = JsonHeader {
        threshold: report.threshold,
        seeds: report.seeds.clone(),
        config_snapshot: report.config_snapshot.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for row in &report.rows {
        for run in &row.runs {
            let line = JsonRun {
                row: row.name.clone(),
                seed: run.seed,
                report: run.report.clone(),
                error: run.error.clone(),
            };
            out += &serde_json::to_string(&line).expect("row serializes");
            out.push('\n');
        }
    }
    out
}

/// Renders `report` in `format`. Output depends only on the report.
pub fn render_report(report: &AblationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::TextTable => render_table(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::JsonLines => render_json_lines(report),
    }
}

pub fn emit_report(report: &AblationReport, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

/// Inverse of the json-lines rendering.
pub fn parse_json_lines(text: &str, path: &Path) -> Result<AblationReport> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: JsonHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::format(path, "empty report"))?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for line in lines {
        let run: JsonRun = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        let entry = SeedResult {
            seed: run.seed,
            report: run.report,
            error: run.error,
        };
        match rows.iter_mut().find(|r| r.name == run.row) {
            Some(r) => r.runs.push(entry),
            None => rows.push(AblationRow {
                name: run.row,
                runs: vec![entry],
            }),
        }
    }
    Ok(AblationReport {
        threshold: header.threshold,
        seeds: header.seeds,
        config_snapshot: header.config_snapshot,
        rows,
    })
}
