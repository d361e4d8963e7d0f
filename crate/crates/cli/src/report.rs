//! Plain-text rendering of descriptives and estimation reports.
//!
//! Everything here is a pure function of its inputs so reruns produce
//! byte-identical files.

use std::fmt::Write as _;

use earlywarn::bandwidth::BandwidthDiagnostics;
use earlywarn::cohort::{AttendanceCrosstab, GradeDistribution};
use earlywarn::density::McCraryResult;
use earlywarn::rdd::RddFit;
use earlywarn::stats::Summary;

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.959963984540054;

/// Three decimals; the CSV outputs keep full precision.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    let s = format!("{x:.3}");
    // avoid "-0.000"
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Bandwidths in their shortest form at four decimals, e.g. 0.1275 or 0.51.
pub fn bw(h: f64) -> String {
    format!("{}", (h * 1e4).round() / 1e4)
}

pub fn mccrary_line(r: &McCraryResult) -> String {
    format!(
        "theta = {}, SE = {}, z = {}, p = {} (bin width {}, bandwidth {}, n = {})",
        num(r.theta),
        num(r.std_error),
        num(r.z),
        num(r.p_value),
        bw(r.bin_width),
        bw(r.bandwidth),
        r.n
    )
}

pub fn bandwidth_section(out: &mut String, diag: Option<&BandwidthDiagnostics>, h: f64) {
    writeln!(out, "Bandwidth selection").unwrap();
    match diag {
        None => writeln!(out, "  fixed bandwidth h = {}", bw(h)).unwrap(),
        Some(d) => {
            writeln!(out, "  Imbens-Kalyanaraman, uniform kernel, n = {}", d.n).unwrap();
            writeln!(out, "  h_opt                   {}", bw(d.h_opt)).unwrap();
            writeln!(out, "  pilot bandwidth         {}", bw(d.pilot_bandwidth)).unwrap();
            writeln!(out, "  density at cutoff       {}", num(d.f_hat_c)).unwrap();
            writeln!(out, "  variance at cutoff      {}", num(d.sigma2_c)).unwrap();
            writeln!(out, "  third derivative        {}", num(d.third_derivative)).unwrap();
            writeln!(
                out,
                "  curvature bandwidths    {} / {}",
                bw(d.curvature_bandwidths.0),
                bw(d.curvature_bandwidths.1)
            )
            .unwrap();
            writeln!(
                out,
                "  second derivatives      {} / {}",
                num(d.second_derivatives.0),
                num(d.second_derivatives.1)
            )
            .unwrap();
            writeln!(
                out,
                "  regularization          {} / {}",
                num(d.regularization.0),
                num(d.regularization.1)
            )
            .unwrap();
        }
    }
}

/// Estimates table followed by the F block and weak-instrument notes.
pub fn fit_table(out: &mut String, title: &str, fits: &[RddFit]) {
    writeln!(out, "{title}").unwrap();
    let header = [
        "bandwidth",
        "Observations",
        "Estimate",
        "Std. Error",
        "z-value",
        "p-value",
        "95% CI",
    ];
    let rows: Vec<[String; 7]> = fits
        .iter()
        .map(|f| {
            let (lo, hi) = f.confidence_interval(Z_95);
            [
                format!("{} ({})", f.label, bw(f.bandwidth)),
                f.n_window.to_string(),
                num(f.estimate),
                num(f.std_error),
                num(f.z_value),
                num(f.p_value),
                format!("[{}, {}]", num(lo), num(hi)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = String::from(" ");
        for (j, c) in cells.iter().enumerate() {
            if j == 0 {
                write!(s, " {:<w$}", c, w = widths[j]).unwrap();
            } else {
                write!(s, "  {:>w$}", c, w = widths[j]).unwrap();
            }
        }
        s
    };
    writeln!(out, "{}", line(header.to_vec())).unwrap();
    for r in &rows {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
    }
    writeln!(out).unwrap();
    for f in fits {
        writeln!(
            out,
            "  {}: F-statistic {} on {} and {} DF, p-value {}",
            f.label,
            num(f.f_test.statistic),
            f.f_test.df_num,
            f.f_test.df_den,
            num(f.f_test.p_value)
        )
        .unwrap();
    }
    for f in fits.iter().filter(|f| f.weak_instrument) {
        writeln!(
            out,
            "  note: weak instrument at {} (first-stage F = {} < 10)",
            f.label,
            num(f.first_stage_f)
        )
        .unwrap();
    }
}

pub fn grade_section(out: &mut String, g: &GradeDistribution, no_shows: usize) {
    writeln!(out, "Grade distribution (attendees)").unwrap();
    for (i, c) in g.counts.iter().enumerate() {
        writeln!(out, "  grade {}: {c}", i + 1).unwrap();
    }
    writeln!(out, "  attendees: {}", g.attendees).unwrap();
    writeln!(out, "  no exam attempt: {no_shows}").unwrap();
    match g.failure_rate {
        Some(r) => writeln!(out, "  failure rate: {}", num(r)).unwrap(),
        None => writeln!(out, "  failure rate: absent (no attendees)").unwrap(),
    }
}

pub fn crosstab_section(out: &mut String, t: &AttendanceCrosstab) {
    writeln!(out, "Attendance by warning").unwrap();
    writeln!(out, "  {:<10} {:>9} {:>7} {:>6}", "", "attended", "absent", "total").unwrap();
    let row = |out: &mut String, name: &str, a: usize, b: usize| {
        writeln!(out, "  {name:<10} {a:>9} {b:>7} {:>6}", a + b).unwrap();
    };
    row(out, "warned", t.warned_attended, t.warned_absent);
    row(out, "control", t.control_attended, t.control_absent);
    row(
        out,
        "total",
        t.warned_attended + t.control_attended,
        t.warned_absent + t.control_absent,
    );
}

/// One row per group in the min / quartiles / mean / max / sd shape.
pub fn summary_table(out: &mut String, title: &str, groups: &[(&str, Option<Summary>)]) {
    writeln!(out, "{title}").unwrap();
    writeln!(
        out,
        "  {:<10} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "group", "n", "min", "Q0.25", "median", "mean", "Q0.75", "max", "sd"
    )
    .unwrap();
    for (name, s) in groups {
        match s {
            Some(s) => writeln!(
                out,
                "  {:<10} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                name,
                s.count,
                num(s.min),
                num(s.q25),
                num(s.median),
                num(s.mean),
                num(s.q75),
                num(s.max),
                s.sd.map(num).unwrap_or_else(|| "NA".into())
            )
            .unwrap(),
            None => writeln!(out, "  {name:<10} {:>5}", 0).unwrap(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formats() {
        assert_eq!(num(0.6229508), "0.623");
        assert_eq!(num(-0.0001), "0.000");
        assert_eq!(num(f64::NAN), "NA");
        assert_eq!(bw(0.255 * 0.5), "0.1275");
        assert_eq!(bw(0.255 * 2.0), "0.51");
        assert_eq!(num(1e-9), "0.000");
    }
}
