//! Accuracy tables in CSV form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 5] = ["defense", "attack", "param", "value", "accuracy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    /// Name of the strength parameter (`iterations`, `epsilon`, `fraction`).
    pub param: String,
    pub value: f64,
    pub accuracy: f64,
    /// Not serialized to CSV so that reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub meta: ReportMeta,
}

/// Write `defense,attack,param,value,accuracy` rows in report order;
/// accuracy has four decimals.
pub fn write_report_csv(report: &EvaluationReport, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::contract("refusing to write an empty report"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::contract(format!("csv encoding failed: {e}"));
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for row in &report.rows {
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::contract(format!("accuracy {} outside [0, 1]", row.accuracy)));
        }
        w.write_record([
            row.defense.as_str(),
            row.attack.as_str(),
            row.param.as_str(),
            &row.value.to_string(),
            &format!("{:.4}", row.accuracy),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv encoding failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a report written by [`write_report_csv`]. Errors carry the 1-based
/// line number.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().eq(REPORT_HEADER) => {}
        Some(Ok(_)) => return Err(fail(1, format!("header must be {}", REPORT_HEADER.join(",")))),
        Some(Err(e)) => return Err(fail(1, e.to_string())),
        None => return Err(fail(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 {
            return Err(fail(line, format!("expected 5 fields, got {}", record.len())));
        }
        let number = |i: usize, what: &str| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(line, format!("{what} {:?} is not a number", &record[i])))
        };
        let value = number(3, "value")?;
        let accuracy = number(4, "accuracy")?;
        rows.push(ReportRow {
            defense: record[0].to_owned(),
            attack: record[1].to_owned(),
            param: record[2].to_owned(),
            value,
            accuracy,
            wall_seconds: 0.0,
        });
    }
    Ok(rows)
}
