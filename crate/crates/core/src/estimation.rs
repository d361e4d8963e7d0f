//! Linear estimators: least squares through a Householder QR factorization,
//! two-stage least squares, and the joint significance F-test.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::{f_survival, normal_two_sided_p};

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Rule-of-thumb threshold for the first-stage F statistic of the excluded instrument.
pub const WEAK_INSTRUMENT_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum CovarianceKind {
    /// `sigma2 * (X'X)^-1` with `sigma2 = RSS / (n - k)`.
    #[default]
    Homoskedastic,
    /// HC1 sandwich estimator.
    Robust,
}

/// A regression design. Column 0 is always the intercept.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Design {
    pub fn with_intercept(n: usize) -> Self {
        Design {
            n,
            names: vec!["(Intercept)".to_string()],
            columns: vec![vec![1.0; n]],
        }
    }

    /// Appends a regressor. Panics if the length differs from the row count,
    /// which is a programming error rather than a data error.
    pub fn column(mut self, name: impl Into<String>, values: &[f64]) -> Self {
        self.push(name, values);
        self
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) {
        assert_eq!(values.len(), self.n, "design column length mismatch");
        self.names.push(name.into());
        self.columns.push(values.to_vec());
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.columns.len(), |i, j| self.columns[j][i])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub rss: f64,
    pub sigma2: f64,
    pub covariance_kind: CovarianceKind,
}

impl LinearFit {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| self.covariance[(j, j)].max(0.0).sqrt())
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|j| self.coefficients[j])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.index_of(name)
            .map(|j| self.covariance[(j, j)].max(0.0).sqrt())
    }

    pub fn df_resid(&self) -> usize {
        self.n - self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FTestResult {
    pub statistic: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub p_value: f64,
}

/// Result of two-stage least squares. `second_stage` carries the structural
/// coefficients with covariance based on residuals that use the observed
/// endogenous regressor.
#[derive(Debug, Clone, Serialize)]
pub struct IvFit {
    pub first_stage: LinearFit,
    pub second_stage: LinearFit,
    /// Squared t statistic of the excluded instrument in the first stage.
    pub first_stage_f: f64,
    pub weak_instrument: bool,
}

impl IvFit {
    /// Coefficient, standard error, z and two-sided p for the endogenous regressor.
    pub fn effect(&self, name: &str) -> Option<(f64, f64, f64, f64)> {
        let est = self.second_stage.coef(name)?;
        let se = self.second_stage.std_error(name)?;
        let z = est / se;
        Some((est, se, z, normal_two_sided_p(z)))
    }
}

fn check_rank(design: &Design) -> Result<()> {
    let k = design.ncols();
    let full = design.matrix();
    if rank_deficient(&full) {
        // Locate the first column that makes the leading block deficient.
        for j in 1..k {
            let sub = full.columns(0, j + 1).into_owned();
            if rank_deficient(&sub) {
                return Err(Error::RankDeficient {
                    column: j,
                    name: design.names[j].clone(),
                });
            }
        }
        return Err(Error::RankDeficient {
            column: 0,
            name: design.names[0].clone(),
        });
    }
    Ok(())
}

fn rank_deficient(m: &DMatrix<f64>) -> bool {
    let sv = m.singular_values();
    let max = sv.max();
    if !max.is_finite() || max == 0.0 {
        return true;
    }
    sv.iter().any(|&s| s < RANK_TOLERANCE * max)
}

/// QR pieces for a full-rank design: `R^-1` and the solution vector.
struct QrSolve {
    coefficients: DVector<f64>,
    r_inv: DMatrix<f64>,
}

fn qr_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<QrSolve> {
    let k = x.ncols();
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numeric("triangular inverse failed".into()))?;
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite least-squares coefficients".into()));
    }
    Ok(QrSolve {
        coefficients,
        r_inv,
    })
}

fn covariance(
    kind: CovarianceKind,
    x: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    residuals: &DVector<f64>,
    sigma2: f64,
) -> DMatrix<f64> {
    let (n, k) = x.shape();
    // (X'X)^-1 = R^-1 R^-T
    let bread = r_inv * r_inv.transpose();
    let cov = match kind {
        CovarianceKind::Homoskedastic => &bread * sigma2,
        CovarianceKind::Robust => {
            let mut meat = DMatrix::<f64>::zeros(k, k);
            for i in 0..n {
                let row = x.row(i);
                let e2 = residuals[i] * residuals[i];
                meat += row.transpose() * row * e2;
            }
            let scale = n as f64 / (n - k) as f64;
            &bread * meat * &bread * scale
        }
    };
    // symmetrize away rounding asymmetry
    (&cov + cov.transpose()) * 0.5
}

/// Ordinary least squares of `y` on `design`.
pub fn ols(y: &[f64], design: &Design) -> Result<LinearFit> {
    ols_with(y, design, CovarianceKind::Homoskedastic)
}

pub fn ols_with(y: &[f64], design: &Design, kind: CovarianceKind) -> Result<LinearFit> {
    let n = design.nrows();
    let k = design.ncols();
    assert_eq!(y.len(), n, "response length mismatch");
    if n <= k {
        return Err(Error::InsufficientDof { n, k });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("response contains non-finite values".into()));
    }
    check_rank(design)?;
    let x = design.matrix();
    let yv = DVector::from_column_slice(y);
    let sol = qr_solve(&x, &yv)?;
    let fitted = &x * &sol.coefficients;
    let residuals = &yv - &fitted;
    let rss = residuals.norm_squared();
    let sigma2 = rss / (n - k) as f64;
    let cov = covariance(kind, &x, &sol.r_inv, &residuals, sigma2);
    Ok(LinearFit {
        names: design.names.clone(),
        coefficients: sol.coefficients.iter().copied().collect(),
        covariance: cov,
        residuals: residuals.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        n,
        k,
        rss,
        sigma2,
        covariance_kind: kind,
    })
}

/// Two-stage least squares with one endogenous regressor and one excluded instrument.
///
/// Stage one regresses the endogenous regressor on `(1, instrument, exogenous...)`;
/// stage two regresses `y` on `(1, fitted endogenous, exogenous...)`. Residuals for
/// the variance use the observed endogenous regressor.
pub fn two_stage_ls(
    y: &[f64],
    endogenous: (&str, &[f64]),
    exogenous: &[(&str, &[f64])],
    instrument: (&str, &[f64]),
    kind: CovarianceKind,
) -> Result<IvFit> {
    let n = y.len();
    let (endo_name, endo) = endogenous;
    let (inst_name, inst) = instrument;
    assert_eq!(endo.len(), n);
    assert_eq!(inst.len(), n);
    if inst.iter().all(|&z| z == inst[0]) {
        return Err(Error::NoInstrumentVariation);
    }

    let mut first = Design::with_intercept(n).column(inst_name, inst);
    for (name, col) in exogenous {
        first.push(*name, col);
    }
    let first_fit = ols(endo, &first)?;
    let inst_idx = 1;
    let t_inst = first_fit.coefficients[inst_idx] / first_fit.covariance[(inst_idx, inst_idx)].sqrt();
    let first_stage_f = t_inst * t_inst;

    let mut second = Design::with_intercept(n).column(endo_name, &first_fit.fitted);
    for (name, col) in exogenous {
        second.push(*name, col);
    }
    let k = second.ncols();
    if n <= k {
        return Err(Error::InsufficientDof { n, k });
    }
    check_rank(&second)?;
    let x_hat = second.matrix();
    let yv = DVector::from_column_slice(y);
    let sol = qr_solve(&x_hat, &yv)?;

    // Structural residuals with the observed endogenous regressor.
    let mut x_obs = x_hat.clone();
    for i in 0..n {
        x_obs[(i, 1)] = endo[i];
    }
    let fitted = &x_obs * &sol.coefficients;
    let residuals = &yv - &fitted;
    let rss = residuals.norm_squared();
    let sigma2 = rss / (n - k) as f64;
    let cov = covariance(kind, &x_hat, &sol.r_inv, &residuals, sigma2);

    let second_fit = LinearFit {
        names: second.names.clone(),
        coefficients: sol.coefficients.iter().copied().collect(),
        covariance: cov,
        residuals: residuals.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        n,
        k,
        rss,
        sigma2,
        covariance_kind: kind,
    };
    Ok(IvFit {
        first_stage: first_fit,
        second_stage: second_fit,
        first_stage_f,
        weak_instrument: !(first_stage_f >= WEAK_INSTRUMENT_F),
    })
}

/// Joint test that every slope coefficient (all columns but the intercept) is zero.
pub fn joint_f_test(y: &[f64], design: &Design) -> Result<FTestResult> {
    let n = design.nrows();
    let k = design.ncols();
    if k < 2 {
        return Err(Error::Validation("F-test needs at least one slope regressor".into()));
    }
    if n <= k {
        return Err(Error::InsufficientDof { n, k });
    }
    let full = ols(y, design)?;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let rss_restricted: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let df_num = k - 1;
    let df_den = n - k;
    let statistic = ((rss_restricted - full.rss).max(0.0) / df_num as f64)
        / (full.rss / df_den as f64);
    Ok(FTestResult {
        statistic,
        df_num,
        df_den,
        p_value: f_survival(statistic, df_num as f64, df_den as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Normal equations solved by Gauss-Jordan elimination with partial pivoting.
    fn normal_equations(y: &[f64], cols: &[Vec<f64>]) -> Vec<f64> {
        let k = cols.len();
        let mut a = vec![vec![0.0; k + 1]; k];
        for r in 0..k {
            for c in 0..k {
                a[r][c] = cols[r].iter().zip(&cols[c]).map(|(p, q)| p * q).sum();
            }
            a[r][k] = cols[r].iter().zip(y).map(|(p, q)| p * q).sum();
        }
        for p in 0..k {
            let piv = (p..k)
                .max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs()))
                .unwrap();
            a.swap(p, piv);
            for r in 0..k {
                if r != p {
                    let f = a[r][p] / a[p][p];
                    for c in p..=k {
                        a[r][c] -= f * a[p][c];
                    }
                }
            }
        }
        (0..k).map(|r| a[r][k] / a[r][r]).collect()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn exact_linear_response_interpolates() {
        let x1 = [0.0, 1.0, 2.0, 3.0, 4.0];
        let x2 = [1.0, -1.0, 0.5, 2.0, 0.0];
        let y: Vec<f64> = (0..5).map(|i| 2.0 + 3.0 * x1[i] - 1.5 * x2[i]).collect();
        let fit = ols(&y, &Design::with_intercept(5).column("x1", &x1).column("x2", &x2)).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coefficients[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coefficients[2], -1.5, epsilon = 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let mut seed = 7u64;
        let n = 12;
        let x1: Vec<f64> = (0..n).map(|_| lcg(&mut seed)).collect();
        let x2: Vec<f64> = (0..n).map(|_| 5.0 * lcg(&mut seed) - 2.0).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + x1[i] - 0.3 * x2[i] + lcg(&mut seed)).collect();
        let fit = ols(&y, &Design::with_intercept(n).column("a", &x1).column("b", &x2)).unwrap();
        let oracle = normal_equations(&y, &[vec![1.0; n], x1.clone(), x2.clone()]);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, max_relative = 1e-8);
        }
        // residuals orthogonal to each column
        for col in [vec![1.0; n], x1, x2] {
            let dot: f64 = col.iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        let err = ols(&y, &Design::with_intercept(5).column("x", &x).column("x_copy", &x)).unwrap_err();
        match err {
            Error::RankDeficient { column, name } => {
                assert_eq!(column, 2);
                assert_eq!(name, "x_copy");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let err = ols(&[1.0, 2.0], &Design::with_intercept(2).column("x", &[0.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::InsufficientDof { n: 2, k: 2 }));
    }

    #[test]
    fn f_test_dof_counts() {
        let n = 126;
        let mut seed = 3u64;
        let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| lcg(&mut seed)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| lcg(&mut seed)).collect();
        let mut d = Design::with_intercept(n);
        for (j, c) in cols.iter().enumerate() {
            d.push(format!("x{j}"), c);
        }
        let f = joint_f_test(&y, &d).unwrap();
        assert_eq!((f.df_num, f.df_den), (4, 121));
        assert!((0.0..=1.0).contains(&f.p_value));
    }

    #[test]
    fn constant_instrument_is_rejected() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let t = [0.0, 1.0, 0.0, 1.0];
        let z = [1.0; 4];
        let w = [0.1, 0.2, 0.3, 0.4];
        let err = two_stage_ls(&y, ("T", &t), &[("W", &w)], ("Z", &z), CovarianceKind::Homoskedastic)
            .unwrap_err();
        assert!(matches!(err, Error::NoInstrumentVariation));
    }

    #[test]
    fn robust_covariance_is_symmetric_psd() {
        let mut seed = 11u64;
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| lcg(&mut seed)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * (1.0 + 3.0 * lcg(&mut seed))).collect();
        let fit = ols_with(&y, &Design::with_intercept(n).column("x", &x), CovarianceKind::Robust).unwrap();
        let c = &fit.covariance;
        assert_eq!(c[(0, 1)], c[(1, 0)]);
        assert!(c[(0, 0)] > 0.0 && c[(1, 1)] > 0.0);
        assert!(c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)] >= 0.0);
    }
}
