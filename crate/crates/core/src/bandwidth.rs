//! Imbens–Kalyanaraman data-driven bandwidth for the local linear
//! discontinuity estimator, with the constant for the uniform kernel.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{ols, Design};
use crate::stats::{median, sample_sd};

/// Minimum observations on each side of the cutoff.
pub const MIN_PER_SIDE: usize = 10;

/// Kernel constant of the optimal bandwidth for the uniform kernel.
pub const UNIFORM_KERNEL_CONSTANT: f64 = 5.4;
/// Silverman-type constant of the first pilot bandwidth.
const PILOT_CONSTANT: f64 = 1.84;
/// Constant of the pilot bandwidths for the second-derivative fits.
const CURVATURE_PILOT_CONSTANT: f64 = 3.56;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthDiagnostics {
    pub h_opt: f64,
    pub pilot_bandwidth: f64,
    pub f_hat_c: f64,
    pub sigma2_c: f64,
    /// Third derivative from the global cubic-with-jump fit.
    pub third_derivative: f64,
    /// Pilot bandwidths of the local quadratic fits, (left, right).
    pub curvature_bandwidths: (f64, f64),
    /// Second derivative of the regression function at the cutoff, (left, right).
    pub second_derivatives: (f64, f64),
    /// Regularization terms, (left, right).
    pub regularization: (f64, f64),
    pub n: usize,
}

/// Second-degree polynomial fit of `y` on `d` (distance to the cutoff); returns `2 * a2`.
fn quadratic_curvature(d: &[f64], y: &[f64]) -> Result<f64> {
    let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
    let fit = ols(y, &Design::with_intercept(d.len()).column("d", d).column("d2", &d2))?;
    Ok(2.0 * fit.coefficients[2])
}

/// IK bandwidth from `(W, Y)` pairs. Observations with `W < c` are the left
/// side, `W >= c` the right side.
pub fn ik_bandwidth(w: &[f64], y: &[f64], cutoff: f64) -> Result<BandwidthDiagnostics> {
    assert_eq!(w.len(), y.len(), "W and Y lengths differ");
    if w.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("bandwidth input contains non-finite values".into()));
    }
    let n = w.len();
    let d: Vec<f64> = w.iter().map(|v| v - cutoff).collect();
    let n_left = d.iter().filter(|&&x| x < 0.0).count();
    let n_right = n - n_left;
    if n_left < MIN_PER_SIDE || n_right < MIN_PER_SIDE {
        return Err(Error::InsufficientData(format!(
            "bandwidth selection needs {MIN_PER_SIDE} observations per side, got {n_left} left and {n_right} right"
        )));
    }
    let nf = n as f64;

    // Step 1: density and conditional variance at the cutoff.
    let sd = sample_sd(&d).expect("n >= 20");
    if !(sd > 0.0) {
        return Err(Error::DegenerateDensity("running variable has zero variance".into()));
    }
    let h1 = PILOT_CONSTANT * sd * nf.powf(-0.2);
    let (mut yl, mut yr) = (Vec::new(), Vec::new());
    for (x, v) in d.iter().zip(y) {
        if *x >= -h1 && *x < 0.0 {
            yl.push(*v);
        } else if *x >= 0.0 && *x <= h1 {
            yr.push(*v);
        }
    }
    if yl.is_empty() || yr.is_empty() {
        return Err(Error::DegenerateDensity(
            "no observations near the cutoff on one side within the pilot bandwidth".into(),
        ));
    }
    let f_hat_c = (yl.len() + yr.len()) as f64 / (2.0 * nf * h1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ml, mr) = (mean(&yl), mean(&yr));
    let sigma2_c = (yl.iter().map(|v| (v - ml).powi(2)).sum::<f64>()
        + yr.iter().map(|v| (v - mr).powi(2)).sum::<f64>())
        / (yl.len() + yr.len()) as f64;

    // Step 2: pilot bandwidths from a global cubic with a jump, fitted between
    // the medians of the two sides.
    let left_d: Vec<f64> = d.iter().copied().filter(|x| *x < 0.0).collect();
    let right_d: Vec<f64> = d.iter().copied().filter(|x| *x >= 0.0).collect();
    let med_l = median(&left_d).expect("non-empty");
    let med_r = median(&right_d).expect("non-empty");
    let (mut cd, mut cy) = (Vec::new(), Vec::new());
    for (x, v) in d.iter().zip(y) {
        if *x >= med_l && *x <= med_r {
            cd.push(*x);
            cy.push(*v);
        }
    }
    let jump: Vec<f64> = cd.iter().map(|x| f64::from(u8::from(*x >= 0.0))).collect();
    let cd2: Vec<f64> = cd.iter().map(|x| x * x).collect();
    let cd3: Vec<f64> = cd.iter().map(|x| x * x * x).collect();
    let cubic = ols(
        &cy,
        &Design::with_intercept(cd.len())
            .column("jump", &jump)
            .column("d", &cd)
            .column("d2", &cd2)
            .column("d3", &cd3),
    )?;
    let third_derivative = 6.0 * cubic.coefficients[4];
    if !(third_derivative.abs() > 0.0) {
        return Err(Error::DegenerateDensity("estimated third derivative is zero".into()));
    }
    let pilot = CURVATURE_PILOT_CONSTANT
        * (sigma2_c / (f_hat_c * third_derivative * third_derivative)).powf(1.0 / 7.0);
    let h2l = pilot * (n_left as f64).powf(-1.0 / 7.0);
    let h2r = pilot * (n_right as f64).powf(-1.0 / 7.0);

    let (mut dl, mut vl, mut dr, mut vr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (x, v) in d.iter().zip(y) {
        if *x >= -h2l && *x < 0.0 {
            dl.push(*x);
            vl.push(*v);
        } else if *x >= 0.0 && *x <= h2r {
            dr.push(*x);
            vr.push(*v);
        }
    }
    if dl.len() < 4 || dr.len() < 4 {
        return Err(Error::InsufficientData(
            "too few observations within the curvature pilot bandwidth".into(),
        ));
    }
    let m2l = quadratic_curvature(&dl, &vl)?;
    let m2r = quadratic_curvature(&dr, &vr)?;

    // Step 3: regularized optimal bandwidth.
    let rl = 720.0 * sigma2_c / (dl.len() as f64 * h2l.powi(4));
    let rr = 720.0 * sigma2_c / (dr.len() as f64 * h2r.powi(4));
    let denom = f_hat_c * ((m2r - m2l).powi(2) + rl + rr);
    let h_opt = UNIFORM_KERNEL_CONSTANT * (2.0 * sigma2_c / denom).powf(0.2) * nf.powf(-0.2);
    if !(h_opt.is_finite() && h_opt > 0.0) {
        return Err(Error::Numeric(format!("bandwidth {h_opt} is not positive and finite")));
    }
    Ok(BandwidthDiagnostics {
        h_opt,
        pilot_bandwidth: h1,
        f_hat_c,
        sigma2_c,
        third_derivative,
        curvature_bandwidths: (h2l, h2r),
        second_derivatives: (m2l, m2r),
        regularization: (rl, rr),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize) -> (Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let y: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = if v < 0.4 { 10.0 + 30.0 * v * v } else { 15.0 - 20.0 * v * v + 8.0 * v.powi(3) };
                m + (((i * 7919) % 101) as f64 / 101.0 - 0.5) * 4.0
            })
            .collect();
        (w, y)
    }

    #[test]
    fn diagnostics_are_finite_and_positive() {
        let (w, y) = data(1000);
        let d = ik_bandwidth(&w, &y, 0.4).unwrap();
        assert!(d.h_opt > 0.0 && d.f_hat_c > 0.0 && d.sigma2_c >= 0.0);
        assert!(d.regularization.0 > 0.0 && d.regularization.1 > 0.0);
        assert!(d.second_derivatives.0.is_finite() && d.second_derivatives.1.is_finite());
    }

    #[test]
    fn scale_equivariant() {
        let (w, y) = data(800);
        let base = ik_bandwidth(&w, &y, 0.4).unwrap().h_opt;
        for k in [0.25, 3.0, 40.0] {
            let ws: Vec<f64> = w.iter().map(|v| v * k).collect();
            let h = ik_bandwidth(&ws, &y, 0.4 * k).unwrap().h_opt;
            assert!((h - k * base).abs() <= 1e-8 * k * base, "k={k}: {h} vs {}", k * base);
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let (mut w, mut y) = data(600);
        let a = ik_bandwidth(&w, &y, 0.4).unwrap().h_opt;
        w.reverse();
        y.reverse();
        let b = ik_bandwidth(&w, &y, 0.4).unwrap().h_opt;
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn refuses_thin_sides() {
        let w: Vec<f64> = (0..50).map(|i| 0.41 + i as f64 / 100.0).chain([0.1, 0.2]).collect();
        let y = vec![1.0; w.len()];
        assert!(matches!(ik_bandwidth(&w, &y, 0.4), Err(Error::InsufficientData(_))));
    }
}
