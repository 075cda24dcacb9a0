//! Comparison tables.
//!
//! Columns: `method, dataset, mean_dice, std_dice, p_vs_baseline, wall_seconds`.
//! `p_vs_baseline` is the one-sided Wilcoxon signed-rank p-value of "this method
//! scores higher than the baseline" over paired subjects, empty for the baseline
//! itself. `wall_seconds` is empty when timing is disabled, so reports can be
//! compared byte for byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mean_std, wilcoxon_signed_rank_one_sided, StatsError};

pub const COLUMNS: [&str; 6] = [
    "method",
    "dataset",
    "mean_dice",
    "std_dice",
    "p_vs_baseline",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub p_vs_baseline: Option<f64>,
    pub wall_seconds: Option<f64>,
}

/// Per-subject scores of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: String,
    pub scores: Vec<f64>,
    pub wall_seconds: Option<f64>,
}

/// One row per method; the first method is the baseline for the p-values.
/// All-equal pairs give p = 1.
pub fn compare(dataset: &str, methods: &[MethodScores]) -> Result<Vec<ReportRow>> {
    let Some(base) = methods.first() else {
        return Ok(Vec::new());
    };
    methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.scores.is_empty() {
                return Err(Error::Data(format!("method {} has no scores", m.method)));
            }
            let p = if i == 0 {
                None
            } else {
                match wilcoxon_signed_rank_one_sided(&m.scores, &base.scores) {
                    Ok(p) => Some(p),
                    Err(StatsError::AllZeroDifferences) => Some(1.0),
                    Err(e) => return Err(e.into()),
                }
            };
            let (mean, std) = mean_std(&m.scores);
            Ok(ReportRow {
                method: m.method.clone(),
                dataset: dataset.to_string(),
                mean_dice: mean,
                std_dice: std,
                p_vs_baseline: p,
                wall_seconds: m.wall_seconds,
            })
        })
        .collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow], timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            format!("{:.6}", r.mean_dice),
            format!("{:.6}", r.std_dice),
            fmt(r.p_vs_baseline),
            if timing { fmt(r.wall_seconds) } else { String::new() },
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow], timing: bool) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(f, rows, timing)
}

pub fn report_string(rows: &[ReportRow], timing: bool) -> Result<String> {
    let mut buf = Vec::new();
    write_report(&mut buf, rows, timing)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Data(format!("bad number {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != COLUMNS.len() {
            return Err(Error::Data(format!(
                "{}: expected {} columns",
                path.display(),
                COLUMNS.len()
            )));
        }
        rows.push(ReportRow {
            method: rec[0].to_string(),
            dataset: rec[1].to_string(),
            mean_dice: opt(&rec[2])?.unwrap_or(f64::NAN),
            std_dice: opt(&rec[3])?.unwrap_or(f64::NAN),
            p_vs_baseline: opt(&rec[4])?,
            wall_seconds: opt(&rec[5])?,
        });
    }
    Ok(rows)
}
