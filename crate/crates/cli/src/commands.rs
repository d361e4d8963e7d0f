use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use earlywarn::bandwidth::{ik_bandwidth, BandwidthDiagnostics};
use earlywarn::cohort::{
    attendance_crosstab, build_features, grade_distribution, ingest_exams, ingest_submissions, ingest_tests,
    validate_exam_history, write_features_csv, StudentFeatures,
};
use earlywarn::density::{density_curve_export, mccrary_test};
use earlywarn::estimation::CovarianceKind;
use earlywarn::pass_model::{fit_logit, predict_cohort, FitOptions, LogitModel, TrainingSet};
use earlywarn::rdd::{binned_means, estimate_late, sharp_rdd, write_bins_csv, FTestBasis, RddConfig, RddFit};
use earlywarn::sim::{generate, DgpSpec, Truth};
use earlywarn::stats::Summary;
use earlywarn::treatment::{
    assign, build_analysis_dataset, read_analysis_csv, read_overrides, read_predictions, write_analysis_csv,
    write_exclusions_csv, write_predictions, write_roster, AnalysisRow, AssignmentConfig, Assignments,
};
use earlywarn::{Error, ErrorClass, Result};

use crate::config::{read_to_string, RunConfig};
use crate::report;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), source: e }
}

/// Opens `path` and runs a reader over it; parse errors name the actual file.
fn load<T>(path: &Path, read: impl FnOnce(BufReader<File>) -> Result<T>) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    read(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            context: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

fn write_file(dir: &Path, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut sink = BufWriter::new(file);
    write(&mut sink)?;
    sink.flush().map_err(io_err(&path))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    write_file(dir, name, |w| w.write_all(text.as_bytes()).map_err(io_err(Path::new(name))))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Features of one cohort. Submissions and exams may be absent (a cohort
/// before its exam), online tests are required.
fn cohort_features(
    cfg: &RunConfig,
    submissions: &Option<PathBuf>,
    tests: &Option<PathBuf>,
    exams: &Option<PathBuf>,
) -> Result<Vec<StudentFeatures>> {
    let subs = match submissions {
        Some(p) => load(p, ingest_submissions)?,
        None => Vec::new(),
    };
    let tests = load(cfg.require(tests, "tests")?, ingest_tests)?;
    let exams = match exams {
        Some(p) => load(p, ingest_exams)?,
        None => Vec::new(),
    };
    validate_exam_history(&exams)?;
    build_features(&subs, &tests, &exams, &cfg.feature_config()?)
}

fn assignment_config(cfg: &RunConfig) -> Result<AssignmentConfig> {
    let overrides = match &cfg.overrides {
        Some(p) => load(p, read_overrides)?,
        None => Default::default(),
    };
    Ok(AssignmentConfig {
        cutoff: cfg.cutoff,
        severe_cutoff: cfg.severe_cutoff,
        overrides,
    })
}

fn assignments(cfg: &RunConfig) -> Result<Assignments> {
    let predictions = load(cfg.require(&cfg.predictions, "predictions")?, read_predictions)?;
    assign(&predictions, &assignment_config(cfg)?)
}

pub fn features(cfg: &RunConfig) -> Result<()> {
    let subs = load(cfg.require(&cfg.submissions, "submissions")?, ingest_submissions)?;
    let tests = load(cfg.require(&cfg.tests, "tests")?, ingest_tests)?;
    let exams = load(cfg.require(&cfg.exams, "exams")?, ingest_exams)?;
    validate_exam_history(&exams)?;
    let fcfg = cfg.feature_config()?;
    let feats = build_features(&subs, &tests, &exams, &fcfg)?;
    write_file(&cfg.out, "features.csv", |w| write_features_csv(&feats, &fcfg, w))?;

    let mut out = String::new();
    writeln!(out, "Descriptive statistics").unwrap();
    writeln!(
        out,
        "Quartiles interpolate linearly between order statistics (position p * (n - 1)); sd uses n - 1."
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "Overview").unwrap();
    writeln!(out, "  students: {}", feats.len()).unwrap();
    writeln!(out, "  submissions: {}", subs.len()).unwrap();
    let avg = if feats.is_empty() { f64::NAN } else { subs.len() as f64 / feats.len() as f64 };
    writeln!(out, "  submissions per student: {}", report::num(avg)).unwrap();
    writeln!(out, "  online test results: {}", tests.len()).unwrap();
    writeln!(out).unwrap();
    let grades = grade_distribution(&feats)?;
    let no_shows = feats.iter().filter(|f| f.grade == 6).count();
    report::grade_section(&mut out, &grades, no_shows);

    let exam_points = |keep: &dyn Fn(&StudentFeatures) -> bool| -> Option<Summary> {
        let v: Vec<f64> = feats.iter().filter(|f| keep(f)).filter_map(|f| f.exam_points).collect();
        Summary::of(&v)
    };
    let testate = |keep: &dyn Fn(&StudentFeatures) -> bool| -> Option<Summary> {
        let v: Vec<f64> = feats.iter().filter(|f| keep(f)).map(|f| f.testate_points).collect();
        Summary::of(&v)
    };
    writeln!(out).unwrap();
    if cfg.predictions.is_some() {
        let a = assignments(cfg)?;
        let treated: HashMap<String, bool> = a.rows.iter().map(|r| (r.student_id.clone(), r.t)).collect();
        report::crosstab_section(&mut out, &attendance_crosstab(&feats, &treated)?);
        let warned = |f: &StudentFeatures| treated[&f.student_id];
        let control = |f: &StudentFeatures| !treated[&f.student_id];
        let w_summary = |t: bool| {
            let v: Vec<f64> = a.rows.iter().filter(|r| r.t == t).map(|r| r.w).collect();
            Summary::of(&v)
        };
        writeln!(out).unwrap();
        report::summary_table(
            &mut out,
            "Exam points (latest attempt, attendees)",
            &[("control", exam_points(&control)), ("warned", exam_points(&warned))],
        );
        writeln!(out).unwrap();
        report::summary_table(
            &mut out,
            "Predicted pass probability",
            &[("control", w_summary(false)), ("warned", w_summary(true))],
        );
        writeln!(out).unwrap();
        report::summary_table(
            &mut out,
            "Online test points (covariate)",
            &[("control", testate(&control)), ("warned", testate(&warned))],
        );
    } else {
        report::summary_table(&mut out, "Exam points (latest attempt, attendees)", &[("all", exam_points(&|_| true))]);
        writeln!(out).unwrap();
        report::summary_table(&mut out, "Online test points (covariate)", &[("all", testate(&|_| true))]);
    }
    write_text(&cfg.out, "descriptives.txt", &out)?;
    print!("{out}");
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let selection = cfg.feature_selection()?;
    let model = match (&cfg.train_tests, &cfg.model) {
        (None, Some(path)) => LogitModel::from_json(&read_to_string(path)?)?,
        _ => {
            let prior = cohort_features(cfg, &cfg.train_submissions, &cfg.train_tests, &cfg.train_exams)?;
            if cfg.train_exams.is_none() {
                return Err(Error::Validation(
                    "training needs the prior cohort's exams (use --train-exams)".into(),
                ));
            }
            let train = TrainingSet::from_features(&prior, &selection, cfg.exclude_no_shows)?;
            match fit_logit(&train, FitOptions::default()) {
                Ok(m) => m,
                Err(Error::QuasiSeparation { iterations, partial }) => {
                    write_text(&cfg.out, "model.partial.json", &partial.to_json()?)?;
                    return Err(Error::QuasiSeparation { iterations, partial });
                }
                Err(e) => return Err(e),
            }
        }
    };
    let current = cohort_features(cfg, &cfg.submissions, &cfg.tests, &cfg.exams)?;
    let predictions = predict_cohort(&model, &current, &selection)?;
    write_file(&cfg.out, "predictions.csv", |w| write_predictions(&predictions, w))?;
    write_text(&cfg.out, "model.json", &model.to_json()?)?;

    println!(
        "logit on {} training rows, converged = {} after {} iterations, log-likelihood {}",
        model.n_train,
        model.converged,
        model.iterations,
        report::num(model.log_likelihood)
    );
    for (name, b) in std::iter::once("(intercept)").chain(model.feature_names.iter().map(String::as_str)).zip(&model.coefficients) {
        println!("  {name:<20} {b}");
    }
    let below = predictions.iter().filter(|(_, w)| *w <= cfg.cutoff).count();
    println!("{} students predicted, {} at or below the cutoff {}", predictions.len(), below, cfg.cutoff);
    Ok(())
}

pub fn assign_cmd(cfg: &RunConfig) -> Result<()> {
    let a = assignments(cfg)?;
    write_file(&cfg.out, "roster.csv", |w| write_roster(&a, w))?;
    let warned = a.rows.iter().filter(|r| r.t).count();
    println!(
        "{} students, {} warned, {} overrides ({} of students)",
        a.rows.len(),
        warned,
        a.overrides_applied,
        report::num(a.override_fraction)
    );
    if cfg.exams.is_some() {
        let feats = cohort_features(cfg, &cfg.submissions, &cfg.tests, &cfg.exams)?;
        let data = build_analysis_dataset(&feats, &a)?;
        write_file(&cfg.out, "analysis.csv", |w| write_analysis_csv(&data.rows, w))?;
        write_file(&cfg.out, "exclusions.csv", |w| write_exclusions_csv(&data.excluded, w))?;
        println!("{} rows in the analysis sample, {} excluded", data.rows.len(), data.excluded.len());
    }
    Ok(())
}

fn rdd_config(cfg: &RunConfig, h: f64, use_covariates: bool) -> RddConfig {
    RddConfig {
        cutoff: cfg.cutoff,
        bandwidth: h,
        use_covariates,
        slope_change: cfg.slope_change,
        multipliers: cfg.multipliers.clone(),
        covariance: if cfg.robust_se { CovarianceKind::Robust } else { CovarianceKind::Homoskedastic },
        f_test: if cfg.f_test_reduced_form { FTestBasis::ReducedForm } else { FTestBasis::SecondStage },
    }
}

fn select_bandwidth(cfg: &RunConfig, rows: &[AnalysisRow]) -> Result<(f64, Option<BandwidthDiagnostics>)> {
    match cfg.bandwidth.fixed() {
        Some(h) => Ok((h, None)),
        None => {
            let (w, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.attended).map(|r| (r.w, r.y)).unzip();
            let d = ik_bandwidth(&w, &y, cfg.cutoff)?;
            Ok((d.h_opt, Some(d)))
        }
    }
}

/// Compares the fuzzy estimate with the sharp one when everyone in the
/// window complies; returns the report note.
fn sharp_note(rows: &[AnalysisRow], config: &RddConfig, fuzzy: &RddFit) -> Result<String> {
    let single = RddConfig { multipliers: vec![1.0], ..config.clone() };
    match sharp_rdd(rows, &single) {
        Ok(sharp) => {
            let diff = (sharp.estimate - fuzzy.estimate).abs();
            if diff <= 1e-8 * fuzzy.estimate.abs().max(1.0) {
                Ok(format!(
                    "  note: full compliance in the window; fuzzy and sharp estimates agree ({})",
                    report::num(sharp.estimate)
                ))
            } else {
                Ok(format!(
                    "  note: full compliance in the window, but fuzzy ({}) and sharp ({}) estimates differ",
                    report::num(fuzzy.estimate),
                    report::num(sharp.estimate)
                ))
            }
        }
        Err(Error::FuzzyDesign(k)) => Ok(format!("  fuzzy design: {k} noncompliers in the window")),
        Err(e) => Err(e),
    }
}

const FITS_HEADER: [&str; 17] = [
    "covariates",
    "label",
    "multiplier",
    "bandwidth",
    "n_window",
    "estimate",
    "std_error",
    "z_value",
    "p_value",
    "ci_lower",
    "ci_upper",
    "f_statistic",
    "f_df_num",
    "f_df_den",
    "f_p_value",
    "first_stage_f",
    "weak_instrument",
];

/// Shortest round-trip representation, exponent form for tiny values.
fn full(x: f64) -> String {
    format!("{x:?}")
}

fn write_fits(sink: impl Write, tables: &[(bool, Vec<RddFit>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let err = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
    w.write_record(FITS_HEADER).map_err(err)?;
    for (cov, fits) in tables {
        for f in fits {
            let (lo, hi) = f.confidence_interval(report::Z_95);
            w.write_record([
                u8::from(*cov).to_string(),
                f.label.clone(),
                full(f.multiplier),
                full(f.bandwidth),
                f.n_window.to_string(),
                full(f.estimate),
                full(f.std_error),
                full(f.z_value),
                full(f.p_value),
                full(lo),
                full(hi),
                full(f.f_test.statistic),
                f.f_test.df_num.to_string(),
                f.f_test.df_den.to_string(),
                full(f.f_test.p_value),
                full(f.first_stage_f),
                u8::from(f.weak_instrument).to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Io { path: "fits.csv".into(), source: e })
}

fn analysis_rows(cfg: &RunConfig) -> Result<(PathBuf, Vec<AnalysisRow>)> {
    let path = cfg.require(&cfg.analysis, "analysis")?.to_path_buf();
    let rows = load(&path, read_analysis_csv)?;
    Ok((path, rows))
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let (path, rows) = analysis_rows(cfg)?;
    let attending = rows.iter().filter(|r| r.attended).count();
    let noncompliers = rows.iter().filter(|r| r.attended && r.t != r.z).count();

    let mut out = String::new();
    writeln!(out, "Regression discontinuity report").unwrap();
    writeln!(out, "input: {}", file_name(&path)).unwrap();
    writeln!(out, "cutoff: {}", cfg.cutoff).unwrap();
    writeln!(out, "rows: {} ({} attending, {} noncompliers)", rows.len(), attending, noncompliers).unwrap();
    writeln!(
        out,
        "standard errors: {}",
        if cfg.robust_se { "heteroskedasticity-robust (HC1)" } else { "homoskedastic" }
    )
    .unwrap();
    writeln!(out).unwrap();

    writeln!(out, "Density test at the cutoff (McCrary)").unwrap();
    let w_all: Vec<f64> = rows.iter().map(|r| r.w).collect();
    let density = match mccrary_test(&w_all, cfg.cutoff, cfg.mccrary_bin_width, cfg.mccrary_bandwidth) {
        Ok(r) => {
            writeln!(out, "  {}", report::mccrary_line(&r)).unwrap();
            Some(r)
        }
        Err(e) if e.class() == ErrorClass::Validity => {
            writeln!(out, "  not available: {e}").unwrap();
            None
        }
        Err(e) => return Err(e),
    };
    writeln!(out).unwrap();

    let (h, diag) = select_bandwidth(cfg, &rows)?;
    report::bandwidth_section(&mut out, diag.as_ref(), h);
    writeln!(out).unwrap();

    let settings: Vec<bool> = if cfg.use_covariates { vec![true, false] } else { vec![false] };
    let mut tables = Vec::new();
    for &cov in &settings {
        let rc = rdd_config(cfg, h, cov);
        let fits = estimate_late(&rows, &rc)?;
        let title = if cov { "Estimates with covariates" } else { "Estimates without covariates" };
        report::fit_table(&mut out, title, &fits);
        let reference = match fits.iter().find(|f| f.multiplier == 1.0) {
            Some(f) => f.clone(),
            None => estimate_late(&rows, &RddConfig { multipliers: vec![1.0], ..rc.clone() })?.remove(0),
        };
        writeln!(out, "{}", sharp_note(&rows, &rc, &reference)?).unwrap();
        writeln!(out).unwrap();
        tables.push((cov, fits));
    }

    let bins = binned_means(&rows, cfg.cutoff, cfg.bin_width)?;
    write_file(&cfg.out, "rdd_bins.csv", |w| write_bins_csv(&bins, w))?;
    write_file(&cfg.out, "fits.csv", |w| write_fits(w, &tables))?;
    if let Some(r) = &density {
        write_file(&cfg.out, "mccrary.csv", |w| density_curve_export(r, w))?;
    }
    write_text(&cfg.out, "report.txt", &out)?;
    print!("{out}");
    Ok(())
}

pub fn mccrary(cfg: &RunConfig) -> Result<()> {
    let w: Vec<f64> = match (&cfg.analysis, &cfg.predictions) {
        (Some(_), _) => analysis_rows(cfg)?.1.iter().map(|r| r.w).collect(),
        (None, Some(p)) => load(p, read_predictions)?.into_iter().map(|(_, w)| w).collect(),
        (None, None) => {
            return Err(Error::Validation("no analysis or predictions file given".into()));
        }
    };
    let r = mccrary_test(&w, cfg.cutoff, cfg.mccrary_bin_width, cfg.mccrary_bandwidth)?;
    write_file(&cfg.out, "mccrary.csv", |sink| density_curve_export(&r, sink))?;
    println!("{}", report::mccrary_line(&r));
    Ok(())
}

pub fn bandwidth(cfg: &RunConfig) -> Result<()> {
    let (_, rows) = analysis_rows(cfg)?;
    let (w, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.attended).map(|r| (r.w, r.y)).unzip();
    let d = ik_bandwidth(&w, &y, cfg.cutoff)?;
    let json = serde_json::to_string_pretty(&d).map_err(|e| Error::Numeric(e.to_string()))?;
    write_text(&cfg.out, "bandwidth.json", &(json + "\n"))?;
    let mut out = String::new();
    report::bandwidth_section(&mut out, Some(&d), d.h_opt);
    print!("{out}");
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require(&cfg.dgp, "dgp")?;
    let mut spec: DgpSpec =
        toml::from_str(&read_to_string(path)?).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let rows = generate(&spec)?;
    write_file(&cfg.out, "analysis.csv", |w| write_analysis_csv(&rows, w))?;
    let truth = serde_json::to_string_pretty(&Truth::of(&spec)).map_err(|e| Error::Numeric(e.to_string()))?;
    write_text(&cfg.out, "truth.json", &(truth + "\n"))?;
    println!("{} rows, true LATE {}, seed {}", rows.len(), spec.true_late, spec.seed);
    Ok(())
}
