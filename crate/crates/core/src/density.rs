//! McCrary sorting test for a discontinuity in the density of the running
//! variable at the cutoff.
//!
//! A fine histogram is built with the cutoff as a bin edge, then each side is
//! smoothed by a triangular-kernel local linear regression of bin heights on
//! bin midpoints. The test statistic is the log ratio of the two boundary
//! estimates.

use std::io::Write;

use serde::Serialize;

use crate::cohort::csv_err;
use crate::error::{Error, Result};
use crate::estimation::{ols, Design};
use crate::stats::{normal_two_sided_p, sample_sd};

/// Minimum observations required on each side of the cutoff.
pub const MIN_PER_SIDE: usize = 20;
/// Constant of the rule-of-thumb bandwidth for the triangular kernel.
const BANDWIDTH_CONSTANT: f64 = 3.348;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub midpoint: f64,
    pub count: usize,
    /// `count / (n * b)`.
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub w: f64,
    pub density: f64,
    /// At or below the cutoff.
    pub below: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCraryResult {
    pub cutoff: f64,
    pub n: usize,
    /// `ln f(c+) - ln f(c-)`.
    pub theta: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub bin_width: f64,
    pub bandwidth: f64,
    pub density_left: f64,
    pub density_right: f64,
    pub left_bins: Vec<HistogramBin>,
    pub right_bins: Vec<HistogramBin>,
    pub curve: Vec<CurvePoint>,
}

/// Bin `j` covers `(c + (j - 1) b, c + j b]`; sides are `j <= 0` and `j >= 1`.
fn bin_index(w: f64, cutoff: f64, b: f64) -> i64 {
    let ratio = (w - cutoff) / b;
    ((ratio * 1e9).round() / 1e9).ceil() as i64
}

fn midpoint(j: i64, cutoff: f64, b: f64) -> f64 {
    cutoff + (j as f64 - 0.5) * b
}

/// Weighted local linear fit of heights on `midpoint - at`; returns the intercept.
fn local_linear(bins: &[HistogramBin], at: f64, h: f64) -> Option<f64> {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut t0 = 0.0;
    let mut t1 = 0.0;
    let mut used = 0;
    for bin in bins {
        let d = bin.midpoint - at;
        let k = 1.0 - (d / h).abs();
        if k <= 0.0 {
            continue;
        }
        used += 1;
        s0 += k;
        s1 += k * d;
        s2 += k * d * d;
        t0 += k * bin.height;
        t1 += k * d * bin.height;
    }
    let det = s0 * s2 - s1 * s1;
    if used < 2 || !(det > 1e-14 * s0 * s2) {
        return None;
    }
    Some((s2 * t0 - s1 * t1) / det)
}

/// Rule-of-thumb bandwidth from a global quartic fit to the bin heights on one side.
fn side_bandwidth(bins: &[HistogramBin], cutoff: f64) -> Result<f64> {
    let m = bins.len();
    if m < 6 {
        return Err(Error::InsufficientData(format!(
            "{m} histogram bins on one side; automatic bandwidth needs at least 6"
        )));
    }
    let d: Vec<f64> = bins.iter().map(|b| b.midpoint - cutoff).collect();
    let pow = |p: i32| d.iter().map(|x| x.powi(p)).collect::<Vec<_>>();
    let design = Design::with_intercept(m)
        .column("d", &d)
        .column("d2", &pow(2))
        .column("d3", &pow(3))
        .column("d4", &pow(4));
    let heights: Vec<f64> = bins.iter().map(|b| b.height).collect();
    let fit = ols(&heights, &design)?;
    let a = &fit.coefficients;
    let curvature: f64 = d
        .iter()
        .map(|x| {
            let fpp = 2.0 * a[2] + 6.0 * a[3] * x + 12.0 * a[4] * x * x;
            fpp * fpp
        })
        .sum();
    let range = d
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    let h = BANDWIDTH_CONSTANT * (fit.sigma2 * range / curvature).powf(0.2);
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::DegenerateDensity("automatic bandwidth is not finite".into()));
    }
    Ok(h)
}

pub fn mccrary_test(w: &[f64], cutoff: f64, bin_width: Option<f64>, bandwidth: Option<f64>) -> Result<McCraryResult> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("running variable contains non-finite values".into()));
    }
    let n = w.len();
    let n_left = w.iter().filter(|&&v| v <= cutoff).count();
    let n_right = n - n_left;
    if n_left < MIN_PER_SIDE || n_right < MIN_PER_SIDE {
        return Err(Error::InsufficientData(format!(
            "density test needs {MIN_PER_SIDE} observations per side, got {n_left} left and {n_right} right"
        )));
    }
    let b = match bin_width {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(Error::Validation(format!("bin width {b} must be positive"))),
        None => 2.0 * sample_sd(w).expect("n >= 40") / (n as f64).sqrt(),
    };
    if !(b > 0.0) {
        return Err(Error::DegenerateDensity("running variable has zero spread".into()));
    }

    let idx: Vec<i64> = w.iter().map(|&v| bin_index(v, cutoff, b)).collect();
    let jmin = *idx.iter().min().expect("non-empty");
    let jmax = *idx.iter().max().expect("non-empty");
    let mut counts = vec![0usize; (jmax - jmin + 1) as usize];
    for j in &idx {
        counts[(j - jmin) as usize] += 1;
    }
    let scale = 1.0 / (n as f64 * b);
    let mut left_bins = Vec::new();
    let mut right_bins = Vec::new();
    for (off, &count) in counts.iter().enumerate() {
        let j = jmin + off as i64;
        let bin = HistogramBin {
            midpoint: midpoint(j, cutoff, b),
            count,
            height: count as f64 * scale,
        };
        if j <= 0 {
            left_bins.push(bin);
        } else {
            right_bins.push(bin);
        }
    }

    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Validation(format!("bandwidth {h} must be positive"))),
        None => 0.5 * (side_bandwidth(&left_bins, cutoff)? + side_bandwidth(&right_bins, cutoff)?),
    };

    let usable = |bins: &[HistogramBin]| bins.iter().filter(|b| (b.midpoint - cutoff).abs() < h).count();
    if usable(&left_bins) < 2 || usable(&right_bins) < 2 {
        return Err(Error::InsufficientData(format!(
            "fewer than 2 histogram bins within bandwidth {h} on a side"
        )));
    }
    let f_left = local_linear(&left_bins, cutoff, h)
        .ok_or_else(|| Error::InsufficientData("left-side boundary fit is singular".into()))?;
    let f_right = local_linear(&right_bins, cutoff, h)
        .ok_or_else(|| Error::InsufficientData("right-side boundary fit is singular".into()))?;
    if !(f_left > 0.0 && f_right > 0.0) {
        return Err(Error::DegenerateDensity(format!(
            "boundary density estimates {f_left} (left) and {f_right} (right) must be positive"
        )));
    }
    let theta = f_right.ln() - f_left.ln();
    let std_error = ((1.0 / (n as f64 * h)) * (24.0 / 5.0) * (1.0 / f_right + 1.0 / f_left)).sqrt();
    let z = theta / std_error;

    let mut curve = Vec::with_capacity(left_bins.len() + right_bins.len() + 2);
    for bin in &left_bins {
        let f = local_linear(&left_bins, bin.midpoint, h).unwrap_or(bin.height);
        curve.push(CurvePoint { w: bin.midpoint, density: f.max(0.0), below: true });
    }
    curve.push(CurvePoint { w: cutoff, density: f_left, below: true });
    curve.push(CurvePoint { w: cutoff, density: f_right, below: false });
    for bin in &right_bins {
        let f = local_linear(&right_bins, bin.midpoint, h).unwrap_or(bin.height);
        curve.push(CurvePoint { w: bin.midpoint, density: f.max(0.0), below: false });
    }

    Ok(McCraryResult {
        cutoff,
        n,
        theta,
        std_error,
        z,
        p_value: normal_two_sided_p(z),
        bin_width: b,
        bandwidth: h,
        density_left: f_left,
        density_right: f_right,
        left_bins,
        right_bins,
        curve,
    })
}

impl McCraryResult {
    /// Trapezoid integral of the smoothed density over both sides.
    pub fn curve_mass(&self) -> f64 {
        let side = |below: bool| {
            let pts: Vec<&CurvePoint> = self.curve.iter().filter(|p| p.below == below).collect();
            pts.windows(2)
                .map(|p| 0.5 * (p[0].density + p[1].density) * (p[1].w - p[0].w))
                .sum::<f64>()
        };
        side(true) + side(false)
    }
}

/// Writes `w,density,side,histogram`. Rows are ordered by `w` and side; the
/// two boundary estimates at the cutoff have no histogram height.
pub fn density_curve_export<W: Write>(result: &McCraryResult, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["w", "density", "side", "histogram"]).map_err(csv_err)?;
    let heights = result.left_bins.iter().chain(&result.right_bins);
    let mut heights = heights.peekable();
    for p in &result.curve {
        let hist = match heights.peek() {
            Some(b) if b.midpoint == p.w => heights.next().map(|b| b.height.to_string()),
            _ => None,
        };
        w.write_record([
            p.w.to_string(),
            p.density.to_string(),
            if p.below { "left" } else { "right" }.to_string(),
            hist.unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: "mccrary.csv".into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
    }

    #[test]
    fn one_sided_input_fails() {
        let w: Vec<f64> = (0..100).map(|i| 0.5 + i as f64 / 1000.0).collect();
        assert!(matches!(mccrary_test(&w, 0.4, None, None), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn smooth_grid_has_no_jump() {
        let r = mccrary_test(&uniform_grid(2000), 0.4, None, None).unwrap();
        assert!(r.theta.abs() < 0.1, "theta {}", r.theta);
        assert!(r.p_value > 0.05);
        assert!((r.curve_mass() - 1.0).abs() < 0.05, "{}", r.curve_mass());
    }

    #[test]
    fn bins_never_straddle_cutoff() {
        let r = mccrary_test(&uniform_grid(500), 0.4, Some(0.03), Some(0.2)).unwrap();
        for b in &r.left_bins {
            assert!(b.midpoint + 0.5 * r.bin_width <= 0.4 + 1e-12);
        }
        for b in &r.right_bins {
            assert!(b.midpoint - 0.5 * r.bin_width >= 0.4 - 1e-12);
        }
        let total: usize = r.left_bins.iter().chain(&r.right_bins).map(|b| b.count).sum();
        assert_eq!(total, 500);
    }

    #[test]
    fn minimal_input_exports() {
        let w = uniform_grid(40);
        let r = mccrary_test(&w, 0.5, None, Some(0.3)).unwrap();
        let mut out = Vec::new();
        density_curve_export(&r, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let left = text.lines().filter(|l| l.contains(",left,")).count();
        let right = text.lines().filter(|l| l.contains(",right,")).count();
        assert!(left >= 2 && right >= 2);
        let ws: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(ws.windows(2).all(|p| p[0] <= p[1]));
        assert!(r.curve.iter().all(|p| p.density >= 0.0));
    }

    #[test]
    fn affine_rescaling_leaves_theta_unchanged() {
        let w: Vec<f64> = (0..1500)
            .map(|i| {
                let u = (i as f64 + 0.5) / 1500.0;
                u * u * (3.0 - 2.0 * u)
            })
            .collect();
        let a = mccrary_test(&w, 0.4, None, None).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| 3.0 * v + 7.0).collect();
        let b = mccrary_test(&w2, 3.0 * 0.4 + 7.0, None, None).unwrap();
        assert!((a.theta - b.theta).abs() < 1e-8, "{} vs {}", a.theta, b.theta);
        assert!((a.z - b.z).abs() < 1e-6);
    }
}
