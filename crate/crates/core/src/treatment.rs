//! Cutoff assignment of warnings, manual overrides, and the analysis dataset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::Serialize;

use crate::cohort::{csv_err, StudentFeatures};
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF: f64 = 0.4;

/// Rounds to 12 decimal digits so that cutoff comparisons do not depend on
/// the last bits of a platform's floating-point evaluation.
pub fn round_running_variable(w: f64) -> f64 {
    format!("{w:.12}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Override {
    pub treated: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentConfig {
    pub cutoff: f64,
    /// Below this probability the warning is worded more strictly. Recorded only.
    pub severe_cutoff: Option<f64>,
    pub overrides: BTreeMap<String, Override>,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            cutoff: DEFAULT_CUTOFF,
            severe_cutoff: None,
            overrides: BTreeMap::new(),
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::Validation(format!("cutoff {} outside (0, 1)", self.cutoff)));
        }
        if let Some(s) = self.severe_cutoff {
            if !(s > 0.0 && s < self.cutoff) {
                return Err(Error::Validation(format!(
                    "severe cutoff {s} must lie in (0, {})",
                    self.cutoff
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Strict,
    Standard,
    None,
}

impl Severity {
    pub fn label(self) -> &'static str {
        match self {
            Severity::Strict => "strict",
            Severity::Standard => "standard",
            Severity::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub student_id: String,
    pub w: f64,
    /// Instrument: below-or-at the cutoff.
    pub z: bool,
    /// Warning actually sent.
    pub t: bool,
    pub severity: Severity,
    pub override_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignments {
    pub rows: Vec<Assignment>,
    pub overrides_applied: usize,
    /// Share of students whose treatment differs from the instrument.
    pub override_fraction: f64,
}

/// The instrument `1[w <= cutoff]` on the rounded running variable.
pub fn instrument(w: f64, cutoff: f64) -> bool {
    round_running_variable(w) <= cutoff
}

pub fn assign(probabilities: &[(String, f64)], config: &AssignmentConfig) -> Result<Assignments> {
    config.validate()?;
    let mut seen = HashSet::new();
    for (id, w) in probabilities {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate probability for student {id}")));
        }
        if !(*w > 0.0 && *w < 1.0) {
            return Err(Error::Validation(format!("student {id}: probability {w} outside (0, 1)")));
        }
    }
    if let Some(unknown) = config.overrides.keys().find(|k| !seen.contains(k.as_str())) {
        return Err(Error::Validation(format!("override for unknown student {unknown}")));
    }

    let mut overrides_applied = 0;
    let rows: Vec<Assignment> = probabilities
        .iter()
        .map(|(id, w)| {
            let w = round_running_variable(*w);
            let z = w <= config.cutoff;
            let ov = config.overrides.get(id);
            let t = ov.map_or(z, |o| o.treated);
            if t != z {
                overrides_applied += 1;
            }
            let severity = match config.severe_cutoff {
                Some(s) if w <= s => Severity::Strict,
                _ if z => Severity::Standard,
                _ => Severity::None,
            };
            Assignment {
                student_id: id.clone(),
                w,
                z,
                t,
                severity,
                override_reason: ov.map(|o| o.reason.clone()),
            }
        })
        .collect();
    let n = rows.len();
    Ok(Assignments {
        rows,
        overrides_applied,
        override_fraction: if n == 0 { 0.0 } else { overrides_applied as f64 / n as f64 },
    })
}

/// Reads `student_id,forced_treatment,reason`. A reason is mandatory.
pub fn read_overrides<R: Read>(source: R) -> Result<BTreeMap<String, Override>> {
    const CTX: &str = "overrides.csv";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(CTX, 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != ["student_id", "forced_treatment", "reason"] {
        return Err(Error::parse(CTX, 1, "expected header `student_id,forced_treatment,reason`"));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(CTX, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let treated = match &rec[1] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(CTX, line, format!("forced_treatment `{other}` not in {{0, 1}}"))),
        };
        if rec[2].is_empty() {
            return Err(Error::parse(CTX, line, "override reason is required"));
        }
        if out
            .insert(rec[0].to_string(), Override { treated, reason: rec[2].to_string() })
            .is_some()
        {
            return Err(Error::Validation(format!("{CTX}: line {line}: duplicate override for {}", &rec[0])));
        }
    }
    Ok(out)
}

/// Writes `student_id,W`, the running variable of every student.
pub fn write_predictions<W: Write>(predictions: &[(String, f64)], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student_id", "W"]).map_err(csv_err)?;
    for (id, p) in predictions {
        w.write_record([id.as_str(), &p.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "predictions.csv".into(), source: e })
}

pub fn read_predictions<R: Read>(source: R) -> Result<Vec<(String, f64)>> {
    const CTX: &str = "predictions.csv";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(CTX, 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != ["student_id", "W"] {
        return Err(Error::parse(CTX, 1, "expected header `student_id,W`"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(CTX, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let w = rec[1]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(CTX, line, format!("W `{}` is not a number", &rec[1])))?;
        out.push((rec[0].to_string(), w));
    }
    Ok(out)
}

pub fn write_roster<W: Write>(assignments: &Assignments, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student_id", "W", "Z", "T", "severity", "override_reason"])
        .map_err(csv_err)?;
    for a in &assignments.rows {
        w.write_record([
            a.student_id.as_str(),
            &a.w.to_string(),
            if a.z { "1" } else { "0" },
            if a.t { "1" } else { "0" },
            a.severity.label(),
            a.override_reason.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "roster.csv".into(), source: e })
}

/// One student in the estimation sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub student_id: String,
    pub w: f64,
    pub z: bool,
    pub t: bool,
    /// Points in the latest exam attempt.
    pub y: f64,
    /// Covariate: summed online-test points.
    pub x: f64,
    pub attended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub student_id: String,
    pub w: f64,
    pub z: bool,
    pub t: bool,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisDataset {
    pub rows: Vec<AnalysisRow>,
    pub excluded: Vec<Exclusion>,
}

/// Joins assignments with features. Students without an exam attempt are
/// left out of the rows and listed in `excluded`. Output is sorted by id.
pub fn build_analysis_dataset(features: &[StudentFeatures], assignments: &Assignments) -> Result<AnalysisDataset> {
    let mut by_id: HashMap<&str, &StudentFeatures> = HashMap::new();
    for f in features {
        if by_id.insert(&f.student_id, f).is_some() {
            return Err(Error::Validation(format!("duplicate student {}", f.student_id)));
        }
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let mut sorted: Vec<&Assignment> = assignments.rows.iter().collect();
    sorted.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    for a in sorted {
        if !seen.insert(a.student_id.as_str()) {
            return Err(Error::Validation(format!("duplicate student {}", a.student_id)));
        }
        let f = by_id
            .get(a.student_id.as_str())
            .ok_or_else(|| Error::Validation(format!("no features for student {}", a.student_id)))?;
        match f.exam_points {
            Some(y) if f.attended => rows.push(AnalysisRow {
                student_id: a.student_id.clone(),
                w: a.w,
                z: a.z,
                t: a.t,
                y,
                x: f.testate_points,
                attended: true,
            }),
            _ => excluded.push(Exclusion {
                student_id: a.student_id.clone(),
                w: a.w,
                z: a.z,
                t: a.t,
                reason: "no final exam attempt",
            }),
        }
    }
    if let Some(f) = features.iter().find(|f| !seen.contains(f.student_id.as_str())) {
        return Err(Error::Validation(format!("no assignment for student {}", f.student_id)));
    }
    Ok(AnalysisDataset { rows, excluded })
}

pub const ANALYSIS_HEADER: [&str; 7] = ["student_id", "W", "Z", "T", "Y", "X", "attended"];

pub fn write_analysis_csv<W: Write>(rows: &[AnalysisRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(ANALYSIS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.student_id.clone(),
            r.w.to_string(),
            u8::from(r.z).to_string(),
            u8::from(r.t).to_string(),
            r.y.to_string(),
            r.x.to_string(),
            u8::from(r.attended).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "analysis.csv".into(), source: e })
}

pub fn write_exclusions_csv<W: Write>(excluded: &[Exclusion], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student_id", "W", "Z", "T", "reason"]).map_err(csv_err)?;
    for e in excluded {
        w.write_record([
            e.student_id.clone(),
            e.w.to_string(),
            u8::from(e.z).to_string(),
            u8::from(e.t).to_string(),
            e.reason.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "exclusions.csv".into(), source: e })
}

fn flag(s: &str, line: u64, what: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::parse("analysis.csv", line, format!("{what} `{other}` not in {{0, 1}}"))),
    }
}

/// Reads `analysis.csv`. Rows of non-attendees may leave `Y` empty and are
/// returned with `attended = false`.
pub fn read_analysis_csv<R: Read>(source: R) -> Result<Vec<AnalysisRow>> {
    const CTX: &str = "analysis.csv";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(CTX, 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != ANALYSIS_HEADER {
        return Err(Error::parse(CTX, 1, format!("expected header `{}`", ANALYSIS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(CTX, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize, what: &str| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(CTX, line, format!("{what} `{}` is not a number", &rec[i])))
        };
        let w = num(1, "W")?;
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::Validation(format!("{CTX}: line {line}: W={w} outside (0, 1)")));
        }
        let attended = flag(&rec[6], line, "attended")?;
        // Any finite outcome is accepted so that synthetic data passes unchanged.
        let y = if attended || !rec[4].is_empty() { num(4, "Y")? } else { f64::NAN };
        rows.push(AnalysisRow {
            student_id: rec[0].to_string(),
            w,
            z: flag(&rec[2], line, "Z")?,
            t: flag(&rec[3], line, "T")?,
            y,
            x: num(5, "X")?,
            attended,
        });
    }
    Ok(rows)
}
