//! Per-arm examination records and their CSV form.
//!
//! Columns (header row mandatory, SI units):
//! `patient_id, arm, completed, aaa_detected, ap_diameter_m, thrombus,
//! iliac_left_m, iliac_right_m, grade, duration_s, quality_score, acceptance_score`.
//! Optional fields are left empty; a failed exam has `completed = false` and
//! no measurements.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::Grade;

pub const COLUMNS: [&str; 12] = [
    "patient_id",
    "arm",
    "completed",
    "aaa_detected",
    "ap_diameter_m",
    "thrombus",
    "iliac_left_m",
    "iliac_right_m",
    "grade",
    "duration_s",
    "quality_score",
    "acceptance_score",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Bedside,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub patient_id: String,
    pub arm: Arm,
    pub completed: bool,
    pub aaa_detected: bool,
    #[serde(rename = "ap_diameter_m")]
    pub ap_diameter: Option<f64>,
    pub thrombus: Option<bool>,
    #[serde(rename = "iliac_left_m")]
    pub iliac_left: Option<f64>,
    #[serde(rename = "iliac_right_m")]
    pub iliac_right: Option<f64>,
    pub grade: Option<Grade>,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub quality_score: f64,
    pub acceptance_score: f64,
}

impl ExamRecord {
    /// A record for an exam that could not be completed.
    pub fn failed(patient_id: impl Into<String>, arm: Arm, duration: f64) -> Self {
        ExamRecord {
            patient_id: patient_id.into(),
            arm,
            completed: false,
            aaa_detected: false,
            ap_diameter: None,
            thrombus: None,
            iliac_left: None,
            iliac_right: None,
            grade: None,
            duration,
            quality_score: 0.0,
            acceptance_score: 0.0,
        }
    }

    /// Returns the offending column on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.patient_id.is_empty() {
            return Err(("patient_id", "empty patient id".into()));
        }
        for (col, v) in [
            ("ap_diameter_m", self.ap_diameter),
            ("iliac_left_m", self.iliac_left),
            ("iliac_right_m", self.iliac_right),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err((col, format!("diameter must be positive, got {v}")));
                }
            }
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(("duration_s", format!("duration must be non-negative, got {}", self.duration)));
        }
        for (col, v) in [("quality_score", self.quality_score), ("acceptance_score", self.acceptance_score)] {
            if !(0.0..=100.0).contains(&v) {
                return Err((col, format!("score must be within [0, 100], got {v}")));
            }
        }
        if self.completed && self.grade.is_none() {
            return Err(("grade", "completed exam without a grade".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("row {row}, column {column}: {message}")]
    Field { row: usize, column: String, message: String },
    #[error("header: {0}")]
    Header(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn write_records<W: Write>(out: W, records: &[ExamRecord]) -> Result<(), RecordError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn records_to_csv(records: &[ExamRecord]) -> String {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Reads and validates records. Row numbers are 1-based data rows (the
/// header is row 0).
pub fn read_records<R: Read>(input: R) -> Result<Vec<ExamRecord>, RecordError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    for col in COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(RecordError::Header(format!("missing column '{col}'")));
        }
    }
    if let Some(extra) = headers.iter().find(|h| !COLUMNS.contains(h)) {
        return Err(RecordError::Header(format!("unknown column '{extra}'")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let rec = parse_row(&headers, &row).map_err(|(column, message)| RecordError::Field {
            row: row_no,
            column: column.to_string(),
            message,
        })?;
        rec.validate()
            .map_err(|(column, message)| RecordError::Field { row: row_no, column: column.into(), message })?;
        out.push(rec);
    }
    Ok(out)
}

fn parse_row<'a>(headers: &'a csv::StringRecord, row: &csv::StringRecord) -> Result<ExamRecord, (&'a str, String)> {
    let mut rec = ExamRecord::failed("", Arm::Bedside, 0.0);
    for (col, raw) in headers.iter().zip(row.iter()) {
        let v = raw.trim();
        let bad = |what: &str| (col, format!("expected {what}, got '{v}'"));
        let num = || v.parse::<f64>().map_err(|_| bad("a number"));
        let opt_num = || if v.is_empty() { Ok(None) } else { num().map(Some) };
        let flag = || v.parse::<bool>().map_err(|_| bad("true or false"));
        match col {
            "patient_id" => rec.patient_id = v.to_string(),
            "arm" => {
                rec.arm = match v {
                    "bedside" => Arm::Bedside,
                    "remote" => Arm::Remote,
                    _ => return Err(bad("bedside or remote")),
                }
            }
            "completed" => rec.completed = flag()?,
            "aaa_detected" => rec.aaa_detected = flag()?,
            "ap_diameter_m" => rec.ap_diameter = opt_num()?,
            "thrombus" => rec.thrombus = if v.is_empty() { None } else { Some(flag()?) },
            "iliac_left_m" => rec.iliac_left = opt_num()?,
            "iliac_right_m" => rec.iliac_right = opt_num()?,
            "grade" => {
                rec.grade = if v.is_empty() {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad("none, segmentary or diffuse"))?)
                }
            }
            "duration_s" => rec.duration = num()?,
            "quality_score" => rec.quality_score = num()?,
            "acceptance_score" => rec.acceptance_score = num()?,
            _ => {}
        }
    }
    Ok(rec)
}
