//! Runs the binary over synthetic course logs: features -> predict -> assign -> analyze.

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_earlywarn"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Writes submissions/tests/exams for one cohort with `n` students.
fn write_cohort(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subs = String::from("student_id,exercise_id,points,timestamp\n");
    let mut tests = String::from("student_id,test_index,points\n");
    let mut exams = String::from("student_id,attempt,points,passed\n");
    for i in 0..n {
        let id = format!("{prefix}{i:04}");
        let ability: f64 = rng.sample(StandardNormal);
        for t in 1..=5 {
            let e: f64 = rng.sample(StandardNormal);
            let p = (200.0 + 80.0 * ability + 40.0 * e).clamp(0.0, 400.0).round();
            writeln!(tests, "{id},{t},{p}").unwrap();
        }
        for ex in 1..=3 {
            let p = (50.0 + 20.0 * ability).clamp(0.0, 100.0).round();
            writeln!(subs, "{id},ex{ex},{p},2019-05-{:02}T10:{:02}", 10 + ex, rng.random_range(0..60)).unwrap();
        }
        if rng.random::<f64>() < 0.85 {
            let e: f64 = rng.sample(StandardNormal);
            let pts = (30.0 + 9.0 * ability + 6.0 * e).clamp(0.0, 60.0).round();
            let passed = pts >= 30.0;
            writeln!(exams, "{id},1,{pts},{}", u8::from(passed)).unwrap();
        }
    }
    std::fs::write(dir.join(format!("{prefix}_submissions.csv")), subs).unwrap();
    std::fs::write(dir.join(format!("{prefix}_tests.csv")), tests).unwrap();
    std::fs::write(dir.join(format!("{prefix}_exams.csv")), exams).unwrap();
}

#[test]
fn full_pipeline_from_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_cohort(d, "prior", 400, 1);
    write_cohort(d, "cur", 400, 2);
    std::fs::write(
        d.join("overrides.csv"),
        "student_id,forced_treatment,reason\ncur0003,0,already in contact\n",
    )
    .unwrap();
    std::fs::write(
        d.join("run.toml"),
        r#"
submissions = "cur_submissions.csv"
tests = "cur_tests.csv"
exams = "cur_exams.csv"
train_submissions = "prior_submissions.csv"
train_tests = "prior_tests.csv"
train_exams = "prior_exams.csv"
predictions = "out/predictions.csv"
analysis = "out/analysis.csv"
out = "out"
bandwidth = 0.3
multipliers = [1.0, 0.5, 2.0]
score_dates = ["2019-05-12"]
"#,
    )
    .unwrap();

    let o = run(d, &["predict", "--config", "run.toml"]);
    assert!(o.status.success());
    let preds = std::fs::read_to_string(d.join("out/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("student_id,W"));
    assert_eq!(preds.lines().count(), 401);
    let model = std::fs::read_to_string(d.join("out/model.json")).unwrap();
    assert!(model.contains("test_4"));

    let o = run(d, &["features", "--config", "run.toml"]);
    assert!(o.status.success());
    let desc = std::fs::read_to_string(d.join("out/descriptives.txt")).unwrap();
    assert!(desc.contains("Attendance by warning"));
    assert!(desc.contains("Q0.25"));
    assert!(desc.contains("linearly"));
    let feats = std::fs::read_to_string(d.join("out/features.csv")).unwrap();
    assert!(feats.lines().next().unwrap().contains("score_2019-05-12"));

    let o = run(d, &["assign", "--config", "run.toml", "--overrides", "overrides.csv"]);
    assert!(o.status.success());
    let roster = std::fs::read_to_string(d.join("out/roster.csv")).unwrap();
    assert!(roster.contains("already in contact"));
    let analysis = std::fs::read_to_string(d.join("out/analysis.csv")).unwrap();
    let exclusions = std::fs::read_to_string(d.join("out/exclusions.csv")).unwrap();
    assert_eq!(analysis.lines().count() - 1 + exclusions.lines().count() - 1, 400);

    let o = run(d, &["analyze", "--config", "run.toml"]);
    assert!(o.status.success());
    let report = std::fs::read_to_string(d.join("out/report.txt")).unwrap();
    for needle in ["McCrary", "Bandwidth selection", "LATE (0.3)", "Half-BW (0.15)", "Double-BW (0.6)", "on 4 and", "on 3 and"] {
        assert!(report.contains(needle), "missing {needle}:\n{report}");
    }
    for f in ["fits.csv", "rdd_bins.csv", "mccrary.csv"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn empty_exams_give_zero_attendance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_cohort(d, "c", 30, 3);
    std::fs::write(d.join("c_exams.csv"), "student_id,attempt,points,passed\n").unwrap();
    let o = run(
        d,
        &["features", "--submissions", "c_submissions.csv", "--tests", "c_tests.csv", "--exams", "c_exams.csv", "--out", "o"],
    );
    assert!(o.status.success());
    let desc = std::fs::read_to_string(d.join("o/descriptives.txt")).unwrap();
    assert!(desc.contains("attendees: 0"));
    assert!(desc.contains("failure rate: absent"));
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // malformed input -> 2
    std::fs::write(d.join("bad.csv"), "student_id,W\nx,0.5\n").unwrap();
    let o = run(d, &["analyze", "--analysis", "bad.csv", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));

    // empty window -> 3
    std::fs::write(
        d.join("dgp.toml"),
        "n = 300\ntrue_late = 5.0\nbaseline = [10.0, 30.0]\nnoise_sd = 5.0\nseed = 4\n[compliance]\np_below = 0.9\np_above = 0.1\n",
    )
    .unwrap();
    assert!(run(d, &["simulate", "--dgp", "dgp.toml", "--out", "s"]).status.success());
    let o = run(d, &["analyze", "--analysis", "s/analysis.csv", "--bandwidth", "0.000001", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hint:"));

    // missing flag value -> clap usage error, nonzero
    let o = run(d, &["analyze", "--bandwidth", "nope"]);
    assert!(!o.status.success());
}

#[test]
fn sharp_fixture_notes_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("dgp.toml"),
        "n = 600\ntrue_late = 5.0\nbaseline = [10.0, 30.0]\nnoise_sd = 5.0\ncovariate_sd = 100.0\nseed = 9\n[compliance]\np_below = 1.0\np_above = 0.0\n",
    )
    .unwrap();
    assert!(run(d, &["simulate", "--dgp", "dgp.toml", "--out", "s"]).status.success());
    let o = run(d, &["analyze", "--analysis", "s/analysis.csv", "--bandwidth", "0.3", "--out", "o"]);
    assert!(o.status.success());
    let report = std::fs::read_to_string(d.join("o/report.txt")).unwrap();
    assert!(report.contains("fuzzy and sharp estimates agree"), "{report}");
}

#[test]
fn simulate_seed_flag_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("dgp.toml"),
        "n = 100\ntrue_late = 2.5\nbaseline = [10.0]\nnoise_sd = 1.0\nseed = 1\n[compliance]\np_below = 0.9\np_above = 0.1\n",
    )
    .unwrap();
    for o in ["a", "b"] {
        assert!(run(d, &["simulate", "--dgp", "dgp.toml", "--out", o]).status.success());
    }
    assert!(run(d, &["simulate", "--dgp", "dgp.toml", "--seed", "2", "--out", "c"]).status.success());
    let read = |o: &str| std::fs::read(d.join(o).join("analysis.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("c/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["true_late"], 2.5);
    assert_eq!(truth["spec"]["seed"], 2);
}
