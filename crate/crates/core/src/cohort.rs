//! Course log ingestion and per-student features.
//!
//! Three CSV sources feed the pipeline: homework submissions
//! (`student_id,exercise_id,points,timestamp`), online tests
//! (`student_id,test_index,points`) and final exams
//! (`student_id,attempt,points,passed`). Everything downstream works on
//! [`StudentFeatures`], one per student, sorted by student id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::Serialize;

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";
pub const MAX_SUBMISSION_POINTS: f64 = 100.0;
pub const MAX_TEST_POINTS: f64 = 400.0;
pub const MAX_EXAM_POINTS: f64 = 60.0;
pub const NUM_TESTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmissionRecord {
    pub student_id: String,
    pub exercise_id: String,
    pub points: f64,
    pub timestamp: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineTestRecord {
    pub student_id: String,
    pub test_index: u8,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExamRecord {
    pub student_id: String,
    pub attempt: u8,
    pub points: f64,
    pub passed: bool,
}

fn check_header(rdr: &mut csv::Reader<impl Read>, context: &str, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(context, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(
            context,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn records<R: Read>(
    source: R,
    context: &'static str,
    header: &'static [&'static str],
) -> Result<impl Iterator<Item = Result<(u64, csv::StringRecord)>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(source);
    check_header(&mut rdr, context, header)?;
    Ok(rdr.into_records().map(move |r| {
        let rec = r.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(context, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        Ok((line, rec))
    }))
}

fn parse_f64(field: &str, context: &str, line: u64, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(context, line, format!("{what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(context, line, format!("{what} `{field}` is not finite")));
    }
    Ok(v)
}

fn check_range(v: f64, hi: f64, context: &str, line: u64, what: &str) -> Result<()> {
    if !(0.0..=hi).contains(&v) {
        return Err(Error::Validation(format!(
            "{context}: line {line}: {what}={v} outside [0, {hi}]"
        )));
    }
    Ok(())
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let ts = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).ok()?;
    (ts.second() == 0 && ts.nanosecond() == 0).then_some(ts)
}

pub fn ingest_submissions<R: Read>(source: R) -> Result<Vec<SubmissionRecord>> {
    const CTX: &str = "submissions.csv";
    let mut out = Vec::new();
    for item in records(source, CTX, &["student_id", "exercise_id", "points", "timestamp"])? {
        let (line, rec) = item?;
        let points = parse_f64(&rec[2], CTX, line, "points")?;
        check_range(points, MAX_SUBMISSION_POINTS, CTX, line, "points")?;
        let timestamp = parse_timestamp(&rec[3]).ok_or_else(|| {
            Error::parse(CTX, line, format!("timestamp `{}` is not YYYY-MM-DDTHH:MM", &rec[3]))
        })?;
        out.push(SubmissionRecord {
            student_id: rec[0].to_string(),
            exercise_id: rec[1].to_string(),
            points,
            timestamp,
        });
    }
    Ok(out)
}

pub fn ingest_tests<R: Read>(source: R) -> Result<Vec<OnlineTestRecord>> {
    const CTX: &str = "tests.csv";
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for item in records(source, CTX, &["student_id", "test_index", "points"])? {
        let (line, rec) = item?;
        let test_index: u8 = rec[1]
            .parse()
            .ok()
            .filter(|i| (1..=NUM_TESTS as u8).contains(i))
            .ok_or_else(|| Error::parse(CTX, line, format!("test_index `{}` not in 1..=5", &rec[1])))?;
        let points = parse_f64(&rec[2], CTX, line, "points")?;
        check_range(points, MAX_TEST_POINTS, CTX, line, "points")?;
        if !seen.insert((rec[0].to_string(), test_index)) {
            return Err(Error::Validation(format!(
                "{CTX}: line {line}: duplicate record for student {} test {test_index}",
                &rec[0]
            )));
        }
        out.push(OnlineTestRecord {
            student_id: rec[0].to_string(),
            test_index,
            points,
        });
    }
    Ok(out)
}

pub fn ingest_exams<R: Read>(source: R) -> Result<Vec<ExamRecord>> {
    const CTX: &str = "exams.csv";
    let mut out: Vec<ExamRecord> = Vec::new();
    for item in records(source, CTX, &["student_id", "attempt", "points", "passed"])? {
        let (line, rec) = item?;
        let attempt: u8 = rec[1]
            .parse()
            .ok()
            .filter(|a| *a == 1 || *a == 2)
            .ok_or_else(|| Error::parse(CTX, line, format!("attempt `{}` not in {{1, 2}}", &rec[1])))?;
        let points = parse_f64(&rec[2], CTX, line, "points")?;
        check_range(points, MAX_EXAM_POINTS, CTX, line, "points")?;
        let passed = match &rec[3] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(CTX, line, format!("passed `{other}` not in {{0, 1}}"))),
        };
        out.push(ExamRecord {
            student_id: rec[0].to_string(),
            attempt,
            points,
            passed,
        });
    }
    validate_exam_history(&out)?;
    Ok(out)
}

/// At most one record per attempt, and no attempt after a passed one.
pub fn validate_exam_history(exams: &[ExamRecord]) -> Result<()> {
    let mut by_student: BTreeMap<&str, Vec<&ExamRecord>> = BTreeMap::new();
    for e in exams {
        by_student.entry(&e.student_id).or_default().push(e);
    }
    for (sid, mut attempts) in by_student {
        attempts.sort_by_key(|e| e.attempt);
        for pair in attempts.windows(2) {
            if pair[0].attempt == pair[1].attempt {
                return Err(Error::Validation(format!(
                    "student {sid}: duplicate exam attempt {}",
                    pair[0].attempt
                )));
            }
            if pair[0].passed {
                return Err(Error::Validation(format!(
                    "student {sid}: exam attempt {} follows a passed attempt",
                    pair[1].attempt
                )));
            }
        }
    }
    Ok(())
}

fn end_of_day(t: NaiveDate) -> NaiveDateTime {
    t.and_time(NaiveTime::from_hms_opt(23, 59, 59).expect("valid time"))
}

/// Latest submission per exercise up to the end of `t`. Equal timestamps
/// resolve to the later row.
fn latest_per_exercise<'a, I>(records: I, t: NaiveDate) -> HashMap<&'a str, &'a SubmissionRecord>
where
    I: IntoIterator<Item = &'a SubmissionRecord>,
{
    let cutoff = end_of_day(t);
    let mut latest: HashMap<&str, &SubmissionRecord> = HashMap::new();
    for r in records {
        if r.timestamp > cutoff {
            continue;
        }
        match latest.get(r.exercise_id.as_str()) {
            Some(prev) if prev.timestamp > r.timestamp => {}
            _ => {
                latest.insert(&r.exercise_id, r);
            }
        }
    }
    latest
}

/// Sum over exercises of the points of the student's latest submission up to
/// the end of day `t`. Unattempted exercises contribute zero.
pub fn compute_score(records: &[SubmissionRecord], student: &str, t: NaiveDate) -> f64 {
    score_of(records.iter().filter(|r| r.student_id == student), t)
}

fn score_of<'a, I: IntoIterator<Item = &'a SubmissionRecord>>(records: I, t: NaiveDate) -> f64 {
    let latest = latest_per_exercise(records, t);
    // sum in a fixed order so the result does not depend on hash iteration
    let mut keys: Vec<&&str> = latest.keys().collect();
    keys.sort();
    keys.into_iter().map(|k| latest[*k].points).sum()
}

/// Submissions by `student` with timestamp inside the closed day range `period`.
pub fn count_submissions(
    records: &[SubmissionRecord],
    student: &str,
    period: (NaiveDate, NaiveDate),
) -> Result<usize> {
    check_period(period)?;
    Ok(count_in(records.iter().filter(|r| r.student_id == student), period))
}

fn check_period(period: (NaiveDate, NaiveDate)) -> Result<()> {
    if period.0 > period.1 {
        return Err(Error::Validation(format!(
            "inverted period {} .. {}",
            period.0, period.1
        )));
    }
    Ok(())
}

fn count_in<'a, I: IntoIterator<Item = &'a SubmissionRecord>>(
    records: I,
    (start, end): (NaiveDate, NaiveDate),
) -> usize {
    let lo = start.and_time(NaiveTime::MIN);
    let hi = end_of_day(end);
    records
        .into_iter()
        .filter(|r| r.timestamp >= lo && r.timestamp <= hi)
        .count()
}

/// Distinct exercises with at least one submission up to the end of day `t`.
pub fn begun_exercises(records: &[SubmissionRecord], student: &str, t: NaiveDate) -> usize {
    begun_of(records.iter().filter(|r| r.student_id == student), t)
}

fn begun_of<'a, I: IntoIterator<Item = &'a SubmissionRecord>>(records: I, t: NaiveDate) -> usize {
    let hi = end_of_day(t);
    records
        .into_iter()
        .filter(|r| r.timestamp <= hi)
        .map(|r| r.exercise_id.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Minimum best-attempt exam points for grades 1, 2 and 3 among passing
/// students; any other pass is a 4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct GradeScale {
    pub very_good: f64,
    pub good: f64,
    pub satisfactory: f64,
}

impl Default for GradeScale {
    fn default() -> Self {
        GradeScale {
            very_good: 51.0,
            good: 42.0,
            satisfactory: 33.0,
        }
    }
}

impl GradeScale {
    /// Grade on the 1..=6 scale; 6 marks a student with no exam attempt.
    pub fn grade(&self, attempts: &[&ExamRecord]) -> u8 {
        if attempts.is_empty() {
            return 6;
        }
        if !attempts.iter().any(|e| e.passed) {
            return 5;
        }
        let best = attempts.iter().map(|e| e.points).fold(f64::MIN, f64::max);
        if best >= self.very_good {
            1
        } else if best >= self.good {
            2
        } else if best >= self.satisfactory {
            3
        } else {
            4
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub score_dates: Vec<NaiveDate>,
    pub periods: Vec<(NaiveDate, NaiveDate)>,
    pub begun_dates: Vec<NaiveDate>,
    /// Online tests whose points sum to the covariate.
    pub covariate_tests: Vec<u8>,
    pub grade_scale: GradeScale,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            score_dates: Vec::new(),
            periods: Vec::new(),
            begun_dates: Vec::new(),
            covariate_tests: vec![1, 2, 3, 4],
            grade_scale: GradeScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentFeatures {
    pub student_id: String,
    pub score_at: BTreeMap<NaiveDate, f64>,
    pub submissions_total: usize,
    pub submissions_in_period: BTreeMap<(NaiveDate, NaiveDate), usize>,
    /// Points per online test, index 0 = test 1. Missing tests are 0.
    pub test_points: [f64; NUM_TESTS],
    pub testate_points: f64,
    pub begun_exercises_at: BTreeMap<NaiveDate, usize>,
    pub grade: u8,
    pub attended: bool,
    /// Points of the latest exam attempt; present iff the student attended.
    pub exam_points: Option<f64>,
}

/// Builds one feature row per student seen in any source, sorted by id.
pub fn build_features(
    submissions: &[SubmissionRecord],
    tests: &[OnlineTestRecord],
    exams: &[ExamRecord],
    config: &FeatureConfig,
) -> Result<Vec<StudentFeatures>> {
    for &p in &config.periods {
        check_period(p)?;
    }
    let mut subs_by: BTreeMap<&str, Vec<&SubmissionRecord>> = BTreeMap::new();
    for r in submissions {
        subs_by.entry(&r.student_id).or_default().push(r);
    }
    let mut tests_by: BTreeMap<&str, [f64; NUM_TESTS]> = BTreeMap::new();
    for t in tests {
        tests_by.entry(&t.student_id).or_insert([0.0; NUM_TESTS])[t.test_index as usize - 1] = t.points;
    }
    let mut exams_by: BTreeMap<&str, Vec<&ExamRecord>> = BTreeMap::new();
    for e in exams {
        exams_by.entry(&e.student_id).or_default().push(e);
    }
    let ids: BTreeSet<&str> = subs_by
        .keys()
        .chain(tests_by.keys())
        .chain(exams_by.keys())
        .copied()
        .collect();

    let empty = Vec::new();
    let out = ids
        .into_iter()
        .map(|id| {
            let subs = subs_by.get(id).unwrap_or(&empty);
            let test_points = tests_by.get(id).copied().unwrap_or([0.0; NUM_TESTS]);
            let testate_points = config
                .covariate_tests
                .iter()
                .filter(|&&i| (1..=NUM_TESTS as u8).contains(&i))
                .map(|&i| test_points[i as usize - 1])
                .sum();
            let mut attempts: Vec<&ExamRecord> = exams_by.get(id).cloned().unwrap_or_default();
            attempts.sort_by_key(|e| e.attempt);
            let grade = config.grade_scale.grade(&attempts);
            StudentFeatures {
                student_id: id.to_string(),
                score_at: config
                    .score_dates
                    .iter()
                    .map(|&d| (d, score_of(subs.iter().copied(), d)))
                    .collect(),
                submissions_total: subs.len(),
                submissions_in_period: config
                    .periods
                    .iter()
                    .map(|&p| (p, count_in(subs.iter().copied(), p)))
                    .collect(),
                test_points,
                testate_points,
                begun_exercises_at: config
                    .begun_dates
                    .iter()
                    .map(|&d| (d, begun_of(subs.iter().copied(), d)))
                    .collect(),
                grade,
                attended: !attempts.is_empty(),
                exam_points: attempts.last().map(|e| e.points),
            }
        })
        .collect();
    Ok(out)
}

/// Writes features as CSV with a fixed column order.
pub fn write_features_csv<W: Write>(features: &[StudentFeatures], config: &FeatureConfig, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = vec!["student_id".into(), "submissions_total".into()];
    header.extend((1..=NUM_TESTS).map(|i| format!("test_{i}")));
    header.push("testate_points".into());
    header.extend(config.score_dates.iter().map(|d| format!("score_{d}")));
    header.extend(config.periods.iter().map(|(a, b)| format!("submissions_{a}_{b}")));
    header.extend(config.begun_dates.iter().map(|d| format!("begun_{d}")));
    header.extend(["grade", "attended", "exam_points"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for f in features {
        let mut row: Vec<String> = vec![f.student_id.clone(), f.submissions_total.to_string()];
        row.extend(f.test_points.iter().map(|p| p.to_string()));
        row.push(f.testate_points.to_string());
        row.extend(config.score_dates.iter().map(|d| f.score_at[d].to_string()));
        row.extend(config.periods.iter().map(|p| f.submissions_in_period[p].to_string()));
        row.extend(config.begun_dates.iter().map(|d| f.begun_exercises_at[d].to_string()));
        row.push(f.grade.to_string());
        row.push(u8::from(f.attended).to_string());
        row.push(f.exam_points.map(|p| p.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "features.csv".into(),
        source: e,
    })?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Numeric(format!("csv write failed: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeDistribution {
    /// Counts of grades 1..=5 among attendees.
    pub counts: [usize; 5],
    pub attendees: usize,
    /// Share of grade 5 among attendees; `None` without attendees.
    pub failure_rate: Option<f64>,
}

impl GradeDistribution {
    pub fn from_counts(counts: [usize; 5]) -> Self {
        let attendees: usize = counts.iter().sum();
        GradeDistribution {
            counts,
            attendees,
            failure_rate: (attendees > 0).then(|| counts[4] as f64 / attendees as f64),
        }
    }
}

pub fn grade_distribution(features: &[StudentFeatures]) -> Result<GradeDistribution> {
    let mut counts = [0usize; 5];
    for f in features {
        match f.grade {
            1..=5 => counts[f.grade as usize - 1] += 1,
            6 => {}
            g => {
                return Err(Error::Validation(format!(
                    "student {}: grade {g} outside 1..=6",
                    f.student_id
                )))
            }
        }
    }
    Ok(GradeDistribution::from_counts(counts))
}

/// Warning × attendance counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AttendanceCrosstab {
    pub warned_attended: usize,
    pub warned_absent: usize,
    pub control_attended: usize,
    pub control_absent: usize,
}

impl AttendanceCrosstab {
    pub fn total(&self) -> usize {
        self.warned_attended + self.warned_absent + self.control_attended + self.control_absent
    }
}

pub fn attendance_crosstab(
    features: &[StudentFeatures],
    treatment: &HashMap<String, bool>,
) -> Result<AttendanceCrosstab> {
    let mut t = AttendanceCrosstab::default();
    for f in features {
        let warned = *treatment.get(&f.student_id).ok_or_else(|| {
            Error::Validation(format!("no treatment recorded for student {}", f.student_id))
        })?;
        match (warned, f.attended) {
            (true, true) => t.warned_attended += 1,
            (true, false) => t.warned_absent += 1,
            (false, true) => t.control_attended += 1,
            (false, false) => t.control_absent += 1,
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 6, d).unwrap()
    }

    fn sub(ex: &str, pts: f64, d: u32, h: u32, m: u32) -> SubmissionRecord {
        SubmissionRecord {
            student_id: "s1".into(),
            exercise_id: ex.into(),
            points: pts,
            timestamp: day(d).and_hms_opt(h, m, 0).unwrap(),
        }
    }

    #[test]
    fn header_only_is_empty() {
        let recs = ingest_submissions("student_id,exercise_id,points,timestamp\n".as_bytes()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn single_row() {
        let csv = "student_id,exercise_id,points,timestamp\ns1,ex1,80,2019-06-01T10:15\n";
        let recs = ingest_submissions(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].points, 80.0);
        assert_eq!(recs[0].timestamp, day(1).and_hms_opt(10, 15, 0).unwrap());
    }

    #[test]
    fn out_of_range_points_name_the_row() {
        let csv = "student_id,exercise_id,points,timestamp\ns1,ex1,80,2019-06-01T10:15\ns1,ex2,120,2019-06-01T10:16\n";
        let err = ingest_submissions(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn malformed_rows() {
        let bad_ts = "student_id,exercise_id,points,timestamp\ns1,ex1,80,2019-06-01 10:15:30\n";
        assert!(matches!(ingest_submissions(bad_ts.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let short = "student_id,exercise_id,points,timestamp\ns1,ex1,80\n";
        assert!(matches!(ingest_submissions(short.as_bytes()), Err(Error::Parse { .. })));
        let bad_header = "student,exercise,points,time\n";
        assert!(matches!(ingest_submissions(bad_header.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn test_and_exam_validation() {
        let dup = "student_id,test_index,points\ns1,1,100\ns1,1,200\n";
        assert!(ingest_tests(dup.as_bytes()).is_err());
        let big = "student_id,test_index,points\ns1,2,401\n";
        assert!(ingest_tests(big.as_bytes()).is_err());
        let after_pass = "student_id,attempt,points,passed\ns1,1,40,1\ns1,2,50,0\n";
        assert!(ingest_exams(after_pass.as_bytes()).is_err());
        let ok = "student_id,attempt,points,passed\ns1,1,20,0\ns1,2,31,1\n";
        assert_eq!(ingest_exams(ok.as_bytes()).unwrap().len(), 2);
        let too_many = "student_id,attempt,points,passed\ns1,3,20,0\n";
        assert!(ingest_exams(too_many.as_bytes()).is_err());
        let over = "student_id,attempt,points,passed\ns1,1,61,0\n";
        assert!(ingest_exams(over.as_bytes()).is_err());
    }

    #[test]
    fn score_latest_per_exercise() {
        assert_eq!(compute_score(&[], "s1", day(1)), 0.0);
        let recs = vec![sub("A", 40.0, 1, 9, 0), sub("B", 100.0, 1, 10, 0), sub("A", 80.0, 2, 9, 0)];
        assert_eq!(compute_score(&recs, "s1", day(1)), 140.0);
        assert_eq!(compute_score(&recs, "s1", day(2)), 180.0);
        let drop = vec![sub("A", 90.0, 1, 9, 0), sub("A", 30.0, 2, 9, 0)];
        assert_eq!(compute_score(&drop, "s1", day(2)), 30.0);
        assert_eq!(compute_score(&recs, "nobody", day(2)), 0.0);
    }

    #[test]
    fn score_day_is_inclusive_and_ties_take_last_row() {
        let recs = vec![sub("A", 10.0, 1, 23, 59), sub("A", 70.0, 1, 23, 59)];
        assert_eq!(compute_score(&recs, "s1", day(1)), 70.0);
    }

    #[test]
    fn counts_in_closed_period() {
        let recs = vec![sub("A", 1.0, 1, 0, 0), sub("A", 1.0, 2, 23, 59), sub("B", 1.0, 3, 0, 0)];
        assert_eq!(count_submissions(&recs, "s1", (day(1), day(2))).unwrap(), 2);
        assert_eq!(count_submissions(&recs, "s1", (day(10), day(12))).unwrap(), 0);
        assert!(count_submissions(&recs, "s1", (day(2), day(1))).is_err());
    }

    #[test]
    fn begun_counts_distinct_exercises() {
        let recs = vec![sub("A", 1.0, 1, 0, 0), sub("A", 5.0, 1, 3, 0), sub("B", 1.0, 3, 0, 0)];
        assert_eq!(begun_exercises(&recs, "s1", day(1)), 1);
        assert_eq!(begun_exercises(&recs, "s1", day(3)), 2);
    }

    #[test]
    fn grade_table_failure_rate() {
        let g = GradeDistribution::from_counts([3, 48, 67, 9, 210]);
        assert_eq!(g.attendees, 337);
        assert!((g.failure_rate.unwrap() - 0.623).abs() < 5e-4);
        assert_eq!(GradeDistribution::from_counts([1, 2, 3, 4, 0]).failure_rate, Some(0.0));
        assert_eq!(GradeDistribution::from_counts([0, 0, 0, 0, 1]).failure_rate, Some(1.0));
        assert_eq!(GradeDistribution::from_counts([0; 5]).failure_rate, None);
    }

    fn student(id: &str, attended: bool) -> StudentFeatures {
        StudentFeatures {
            student_id: id.into(),
            score_at: BTreeMap::new(),
            submissions_total: 0,
            submissions_in_period: BTreeMap::new(),
            test_points: [0.0; NUM_TESTS],
            testate_points: 0.0,
            begun_exercises_at: BTreeMap::new(),
            grade: if attended { 3 } else { 6 },
            attended,
            exam_points: attended.then_some(30.0),
        }
    }

    #[test]
    fn crosstab_one_per_cell() {
        let fs = vec![student("a", true), student("b", false), student("c", true), student("d", false)];
        let tr: HashMap<String, bool> = [("a", true), ("b", true), ("c", false), ("d", false)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let t = attendance_crosstab(&fs, &tr).unwrap();
        assert_eq!(t, AttendanceCrosstab { warned_attended: 1, warned_absent: 1, control_attended: 1, control_absent: 1 });
        let none_warned: HashMap<String, bool> = fs.iter().map(|f| (f.student_id.clone(), false)).collect();
        let all_in = vec![student("a", true), student("c", true)];
        let t = attendance_crosstab(&all_in, &none_warned).unwrap();
        assert_eq!(t.control_attended, 2);
        assert_eq!(t.total(), 2);
    }

    #[test]
    fn features_from_logs() {
        let subs = vec![sub("A", 40.0, 1, 9, 0), sub("B", 100.0, 1, 10, 0), sub("A", 80.0, 2, 9, 0)];
        let tests = vec![
            OnlineTestRecord { student_id: "s1".into(), test_index: 1, points: 300.0 },
            OnlineTestRecord { student_id: "s1".into(), test_index: 5, points: 100.0 },
            OnlineTestRecord { student_id: "s0".into(), test_index: 2, points: 50.0 },
        ];
        let exams = vec![
            ExamRecord { student_id: "s1".into(), attempt: 1, points: 20.0, passed: false },
            ExamRecord { student_id: "s1".into(), attempt: 2, points: 31.0, passed: true },
        ];
        let cfg = FeatureConfig {
            score_dates: vec![day(1)],
            periods: vec![(day(2), day(2))],
            begun_dates: vec![day(2)],
            ..FeatureConfig::default()
        };
        let fs = build_features(&subs, &tests, &exams, &cfg).unwrap();
        assert_eq!(fs.len(), 2);
        assert_eq!(fs[0].student_id, "s0");
        assert!(!fs[0].attended);
        assert_eq!(fs[0].grade, 6);
        assert_eq!(fs[0].exam_points, None);
        let s1 = &fs[1];
        assert_eq!(s1.score_at[&day(1)], 140.0);
        assert_eq!(s1.submissions_in_period[&(day(2), day(2))], 1);
        assert_eq!(s1.begun_exercises_at[&day(2)], 2);
        assert_eq!(s1.testate_points, 300.0);
        assert_eq!(s1.exam_points, Some(31.0));
        assert_eq!(s1.grade, 4);
        let g = grade_distribution(&fs).unwrap();
        assert_eq!(g.attendees, 1);
    }

    fn brute_force_score(records: &[SubmissionRecord], t: NaiveDate) -> f64 {
        let cutoff = end_of_day(t);
        let exercises: BTreeSet<&str> = records.iter().map(|r| r.exercise_id.as_str()).collect();
        let mut total = 0.0;
        for ex in exercises {
            // scan all rows; last row among the maximal timestamps wins
            let mut best: Option<(usize, &SubmissionRecord)> = None;
            for (i, r) in records.iter().enumerate() {
                if r.exercise_id != ex || r.timestamp > cutoff {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((j, b)) => r.timestamp > b.timestamp || (r.timestamp == b.timestamp && i > j),
                };
                if better {
                    best = Some((i, r));
                }
            }
            total += best.map(|(_, r)| r.points).unwrap_or(0.0);
        }
        total
    }

    fn arb_log() -> impl Strategy<Value = Vec<SubmissionRecord>> {
        prop::collection::vec((0u8..6, 0u32..=100, 1u32..6, 0u32..3), 0..200).prop_map(|rows| {
            rows.into_iter()
                .map(|(ex, pts, d, m)| sub(&format!("e{ex}"), pts as f64, d, 12, m))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn score_matches_brute_force(log in arb_log(), d in 1u32..6) {
            prop_assert_eq!(compute_score(&log, "s1", day(d)), brute_force_score(&log, day(d)));
        }

        #[test]
        fn score_ignores_order_of_distinct_timestamps(log in arb_log(), d in 1u32..6) {
            // keep one row per (exercise, timestamp) so the tie rule is not exercised
            let mut seen = BTreeSet::new();
            let uniq: Vec<_> = log.into_iter().filter(|r| seen.insert((r.exercise_id.clone(), r.timestamp))).collect();
            let mut rev = uniq.clone();
            rev.reverse();
            prop_assert_eq!(compute_score(&uniq, "s1", day(d)), compute_score(&rev, "s1", day(d)));
        }

        #[test]
        fn grade_counts_sum_to_attendees(flags in prop::collection::vec(any::<bool>(), 0..50)) {
            let fs: Vec<_> = flags.iter().enumerate().map(|(i, &a)| student(&format!("s{i}"), a)).collect();
            let g = grade_distribution(&fs).unwrap();
            prop_assert_eq!(g.counts.iter().sum::<usize>(), flags.iter().filter(|a| **a).count());
            let tr: HashMap<String, bool> = fs.iter().enumerate().map(|(i, f)| (f.student_id.clone(), i % 3 == 0)).collect();
            prop_assert_eq!(attendance_crosstab(&fs, &tr).unwrap().total(), fs.len());
        }
    }
}
