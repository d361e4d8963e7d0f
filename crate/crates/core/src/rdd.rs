//! Local regression-discontinuity estimates around the cutoff.
//!
//! Within a window `|W - c| <= h` the fuzzy design is estimated by two-stage
//! least squares, instrumenting the warning `T` with `Z = 1[W <= c]`. The
//! local regression controls for `W`, optionally for a slope change
//! `Z * (W - c)` and for the covariate `X`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::csv_err;
use crate::error::{Error, Result};
use crate::estimation::{joint_f_test, ols_with, two_stage_ls, CovarianceKind, Design, FTestResult, LinearFit};
use crate::stats::normal_two_sided_p;
use crate::treatment::{round_running_variable, AnalysisRow};

pub const TREATMENT: &str = "T";
pub const TREATMENT_HAT: &str = "T_hat";
pub const INSTRUMENT: &str = "Z";
pub const RUNNING: &str = "W";
pub const SLOPE_CHANGE: &str = "Z:(W-c)";
pub const COVARIATE: &str = "X";

/// Which regression the bandwidth F-test is computed on. Both span the same
/// column space, so they agree up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum FTestBasis {
    /// Outcome on `(1, T_hat, W, Z*(W-c), X)`.
    #[default]
    SecondStage,
    /// Outcome on `(1, Z, W, Z*(W-c), X)`.
    ReducedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RddConfig {
    pub cutoff: f64,
    pub bandwidth: f64,
    pub use_covariates: bool,
    pub slope_change: bool,
    pub multipliers: Vec<f64>,
    pub covariance: CovarianceKind,
    pub f_test: FTestBasis,
}

impl Default for RddConfig {
    fn default() -> Self {
        RddConfig {
            cutoff: crate::treatment::DEFAULT_CUTOFF,
            bandwidth: 0.255,
            use_covariates: true,
            slope_change: true,
            multipliers: vec![1.0, 0.5, 2.0],
            covariance: CovarianceKind::Homoskedastic,
            f_test: FTestBasis::SecondStage,
        }
    }
}

impl RddConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Validation(format!("bandwidth {} must be positive", self.bandwidth)));
        }
        if self.multipliers.is_empty() || self.multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Validation("bandwidth multipliers must be positive".into()));
        }
        Ok(())
    }
}

pub fn multiplier_label(m: f64) -> String {
    if m == 1.0 {
        "LATE".into()
    } else if m == 0.5 {
        "Half-BW".into()
    } else if m == 2.0 {
        "Double-BW".into()
    } else {
        format!("{m}x-BW")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RddFit {
    pub label: String,
    pub multiplier: f64,
    pub bandwidth: f64,
    pub n_window: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
    pub f_test: FTestResult,
    pub first_stage: LinearFit,
    pub first_stage_f: f64,
    pub weak_instrument: bool,
}

impl RddFit {
    /// Normal-approximation confidence interval.
    pub fn confidence_interval(&self, z_crit: f64) -> (f64, f64) {
        (self.estimate - z_crit * self.std_error, self.estimate + z_crit * self.std_error)
    }
}

/// Attending rows with `|W - c| <= h`. Distances are compared at 12 decimal
/// digits, so a row exactly on the boundary is inside.
pub fn window<'a>(rows: &'a [AnalysisRow], cutoff: f64, h: f64) -> Result<Vec<&'a AnalysisRow>> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("bandwidth {h} must be positive")));
    }
    let limit = round_running_variable(h);
    let out: Vec<&AnalysisRow> = rows
        .iter()
        .filter(|r| r.attended && round_running_variable((r.w - cutoff).abs()) <= limit)
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyWindow(h));
    }
    Ok(out)
}

struct Columns {
    y: Vec<f64>,
    t: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
    zw: Vec<f64>,
    x: Vec<f64>,
}

impl Columns {
    fn of(rows: &[&AnalysisRow], cutoff: f64) -> Self {
        let f = |b: bool| f64::from(u8::from(b));
        Columns {
            y: rows.iter().map(|r| r.y).collect(),
            t: rows.iter().map(|r| f(r.t)).collect(),
            z: rows.iter().map(|r| f(r.z)).collect(),
            w: rows.iter().map(|r| r.w).collect(),
            zw: rows.iter().map(|r| f(r.z) * (r.w - cutoff)).collect(),
            x: rows.iter().map(|r| r.x).collect(),
        }
    }

    fn exogenous(&self, config: &RddConfig) -> Vec<(&'static str, &[f64])> {
        let mut exo: Vec<(&str, &[f64])> = vec![(RUNNING, &self.w)];
        if config.slope_change {
            exo.push((SLOPE_CHANGE, &self.zw));
        }
        if config.use_covariates {
            exo.push((COVARIATE, &self.x));
        }
        exo
    }

    fn design(&self, lead: (&str, &[f64]), config: &RddConfig) -> Design {
        let mut d = Design::with_intercept(self.y.len()).column(lead.0, lead.1);
        for (name, col) in self.exogenous(config) {
            d.push(name, col);
        }
        d
    }
}

fn check_instrument(rows: &[&AnalysisRow], cutoff: f64) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.z != (r.w <= cutoff)) {
        return Err(Error::Validation(format!(
            "student {}: Z={} inconsistent with W={} and cutoff {cutoff}",
            r.student_id,
            u8::from(r.z),
            r.w
        )));
    }
    Ok(())
}

fn fuzzy_fit(rows: &[AnalysisRow], config: &RddConfig, multiplier: f64) -> Result<RddFit> {
    let h = config.bandwidth * multiplier;
    let win = window(rows, config.cutoff, h)?;
    check_instrument(&win, config.cutoff)?;
    let cols = Columns::of(&win, config.cutoff);
    let iv = two_stage_ls(
        &cols.y,
        (TREATMENT_HAT, &cols.t),
        &cols.exogenous(config),
        (INSTRUMENT, &cols.z),
        config.covariance,
    )?;
    let (estimate, std_error, z_value, p_value) = iv.effect(TREATMENT_HAT).expect("treatment column present");
    let lead: (&str, &[f64]) = match config.f_test {
        FTestBasis::SecondStage => (TREATMENT_HAT, &iv.first_stage.fitted),
        FTestBasis::ReducedForm => (INSTRUMENT, &cols.z),
    };
    let f_test = joint_f_test(&cols.y, &cols.design(lead, config))?;
    Ok(RddFit {
        label: multiplier_label(multiplier),
        multiplier,
        bandwidth: h,
        n_window: win.len(),
        estimate,
        std_error,
        z_value,
        p_value,
        f_test,
        first_stage_f: iv.first_stage_f,
        weak_instrument: iv.weak_instrument,
        first_stage: iv.first_stage,
    })
}

/// Fuzzy estimates for every bandwidth multiplier, in configuration order.
pub fn estimate_late(rows: &[AnalysisRow], config: &RddConfig) -> Result<Vec<RddFit>> {
    config.validate()?;
    config
        .multipliers
        .par_iter()
        .map(|&m| fuzzy_fit(rows, config, m))
        .collect()
}

/// Sharp design: OLS of `Y` on `(1, T, W, ...)` at the configured bandwidth.
/// Fails if any row in the window does not comply with the cutoff rule.
pub fn sharp_rdd(rows: &[AnalysisRow], config: &RddConfig) -> Result<RddFit> {
    config.validate()?;
    let h = config.bandwidth;
    let win = window(rows, config.cutoff, h)?;
    check_instrument(&win, config.cutoff)?;
    let noncompliers = win.iter().filter(|r| r.t != r.z).count();
    if noncompliers > 0 {
        return Err(Error::FuzzyDesign(noncompliers));
    }
    let cols = Columns::of(&win, config.cutoff);
    let design = cols.design((TREATMENT, &cols.t), config);
    let fit = ols_with(&cols.y, &design, config.covariance)?;
    let estimate = fit.coef(TREATMENT).expect("treatment column present");
    let std_error = fit.std_error(TREATMENT).expect("treatment column present");
    let z_value = estimate / std_error;
    let f_test = joint_f_test(&cols.y, &design)?;
    Ok(RddFit {
        label: "Sharp".into(),
        multiplier: 1.0,
        bandwidth: h,
        n_window: win.len(),
        estimate,
        std_error,
        z_value,
        p_value: normal_two_sided_p(z_value),
        f_test,
        first_stage_f: f64::INFINITY,
        weak_instrument: false,
        first_stage: fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    /// `true` for bins at or below the cutoff (the warned side).
    pub below: bool,
    pub count: usize,
    pub mean_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedSeries {
    pub cutoff: f64,
    pub bin_width: f64,
    pub bins: Vec<Bin>,
}

/// Bin index `j` covers `(c + (j - 1) b, c + j b]`, so the cutoff is always an
/// edge and `W = c` falls with the warned side.
fn bin_index(w: f64, cutoff: f64, width: f64) -> i64 {
    let ratio = (w - cutoff) / width;
    let snapped = (ratio * 1e9).round() / 1e9;
    snapped.ceil() as i64
}

/// Mean outcome per bin of width `bin_width`, empty bins omitted.
pub fn binned_means(rows: &[AnalysisRow], cutoff: f64, bin_width: f64) -> Result<BinnedSeries> {
    if !(bin_width > 0.0) {
        return Err(Error::Validation(format!("bin width {bin_width} must be positive")));
    }
    let mut acc: std::collections::BTreeMap<i64, (usize, f64)> = Default::default();
    for r in rows.iter().filter(|r| r.attended) {
        let e = acc.entry(bin_index(r.w, cutoff, bin_width)).or_default();
        e.0 += 1;
        e.1 += r.y;
    }
    let bins = acc
        .into_iter()
        .map(|(j, (count, sum))| {
            let lower = cutoff + (j - 1) as f64 * bin_width;
            let upper = cutoff + j as f64 * bin_width;
            Bin {
                lower,
                upper,
                midpoint: 0.5 * (lower + upper),
                below: j <= 0,
                count,
                mean_y: sum / count as f64,
            }
        })
        .collect();
    Ok(BinnedSeries { cutoff, bin_width, bins })
}

pub fn write_bins_csv<W: Write>(series: &BinnedSeries, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["bin_lower", "bin_upper", "midpoint", "side", "count", "mean_y"])
        .map_err(csv_err)?;
    for b in &series.bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.midpoint.to_string(),
            if b.below { "left" } else { "right" }.to_string(),
            b.count.to_string(),
            b.mean_y.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "rdd_bins.csv".into(), source: e })
}
