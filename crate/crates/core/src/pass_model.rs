//! Logistic model of the probability of passing the final exam.
//!
//! The model is trained on a previous cohort and its predictions become the
//! running variable of the discontinuity design. Fitting uses iteratively
//! reweighted least squares with step-halving on likelihood decrease.

use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::StudentFeatures;
use crate::error::{Error, Result};

/// Coefficient magnitude beyond which the fit is declared quasi-separated.
pub const SEPARATION_BOUND: f64 = 1e4;
/// Consecutive growing Newton steps that signal divergence.
pub const DIVERGING_STEPS: usize = 5;
/// Predictions are confined to `[MIN_PROBABILITY, 1 - MIN_PROBABILITY]`, the
/// range resolvable at 12 decimal digits.
pub const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub feature_names: Vec<String>,
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_train: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub passed: Vec<bool>,
}

impl TrainingSet {
    pub fn new(feature_names: Vec<String>) -> Self {
        TrainingSet {
            feature_names,
            ..Default::default()
        }
    }

    pub fn push(&mut self, features: Vec<f64>, passed: bool) -> Result<()> {
        if features.len() != self.feature_names.len() {
            return Err(Error::Validation(format!(
                "training row has {} features, expected {}",
                features.len(),
                self.feature_names.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("training row has non-finite feature".into()));
        }
        self.features.push(features);
        self.passed.push(passed);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passed.is_empty()
    }

    /// Builds a training set from a prior cohort. Pass means grade 1..=4.
    /// No-shows (grade 6) count as failures unless `exclude_no_shows`.
    pub fn from_features(
        cohort: &[StudentFeatures],
        selection: &[FeatureSpec],
        exclude_no_shows: bool,
    ) -> Result<Self> {
        let mut set = TrainingSet::new(selection.iter().map(FeatureSpec::name).collect());
        for f in cohort {
            if exclude_no_shows && !f.attended {
                continue;
            }
            let x = selection
                .iter()
                .map(|s| s.extract(f))
                .collect::<Result<Vec<_>>>()?;
            set.push(x, f.grade <= 4)?;
        }
        Ok(set)
    }

    fn design(&self) -> DMatrix<f64> {
        let k = self.feature_names.len() + 1;
        DMatrix::from_fn(self.len(), k, |i, j| if j == 0 { 1.0 } else { self.features[i][j - 1] })
    }

    fn outcome(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.passed.iter().map(|&p| f64::from(u8::from(p))))
    }
}

/// A model input column derived from [`StudentFeatures`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSpec {
    /// Points of online test `1..=5`.
    Test(u8),
    Score(NaiveDate),
    SubmissionsTotal,
}

impl FeatureSpec {
    pub fn name(&self) -> String {
        match self {
            FeatureSpec::Test(i) => format!("test_{i}"),
            FeatureSpec::Score(d) => format!("score_{d}"),
            FeatureSpec::SubmissionsTotal => "submissions_total".into(),
        }
    }

    pub fn extract(&self, f: &StudentFeatures) -> Result<f64> {
        match self {
            FeatureSpec::Test(i) if (1..=5).contains(i) => Ok(f.test_points[*i as usize - 1]),
            FeatureSpec::Test(i) => Err(Error::Validation(format!("no online test {i}"))),
            FeatureSpec::Score(d) => f.score_at.get(d).copied().ok_or_else(|| {
                Error::Validation(format!("score on {d} was not computed for {}", f.student_id))
            }),
            FeatureSpec::SubmissionsTotal => Ok(f.submissions_total as f64),
        }
    }

    /// The four online tests written before the warning went out.
    pub fn default_selection() -> Vec<FeatureSpec> {
        (1..=4).map(FeatureSpec::Test).collect()
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(i) = s.strip_prefix("test_") {
            return i
                .parse()
                .ok()
                .filter(|i| (1..=5).contains(i))
                .map(FeatureSpec::Test)
                .ok_or_else(|| Error::Validation(format!("unknown feature `{s}`")));
        }
        if let Some(d) = s.strip_prefix("score_") {
            return NaiveDate::parse_from_str(d, "%Y-%m-%d")
                .map(FeatureSpec::Score)
                .map_err(|_| Error::Validation(format!("unknown feature `{s}`")));
        }
        if s == "submissions_total" {
            return Ok(FeatureSpec::SubmissionsTotal);
        }
        Err(Error::Validation(format!("unknown feature `{s}`")))
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood at `beta` (intercept first).
pub fn log_likelihood(train: &TrainingSet, beta: &[f64]) -> f64 {
    train
        .features
        .iter()
        .zip(&train.passed)
        .map(|(x, &y)| {
            let eta = linear_predictor(beta, x);
            if y {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

/// Gradient of [`log_likelihood`] with respect to `beta`.
pub fn gradient(train: &TrainingSet, beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for (x, &y) in train.features.iter().zip(&train.passed) {
        let r = f64::from(u8::from(y)) - logistic(linear_predictor(beta, x));
        g[0] += r;
        for (gj, xj) in g[1..].iter_mut().zip(x) {
            *gj += r * xj;
        }
    }
    g
}

fn linear_predictor(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn fit_logit(train: &TrainingSet, opts: FitOptions) -> Result<LogitModel> {
    let n = train.len();
    if n < 2 {
        return Err(Error::Validation(format!("logit needs at least 2 rows, got {n}")));
    }
    if train.passed.iter().all(|&p| p) || train.passed.iter().all(|&p| !p) {
        return Err(Error::DegenerateOutcome);
    }
    let k = train.feature_names.len() + 1;
    let x = train.design();
    let y = train.outcome();

    let mut beta = vec![0.0; k];
    let mut ll = log_likelihood(train, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut growing = 0usize;

    let partial = |beta: &[f64], ll: f64, iterations: usize| LogitModel {
        feature_names: train.feature_names.clone(),
        coefficients: beta.to_vec(),
        converged: false,
        iterations,
        n_train: n,
        log_likelihood: ll,
    };

    while iterations < opts.max_iter {
        iterations += 1;
        let bv = DVector::from_column_slice(&beta);
        let eta = &x * &bv;
        // Weighted least squares on the working response.
        let mut xw = x.clone();
        let mut zw = DVector::zeros(n);
        for i in 0..n {
            let p = logistic(eta[i]);
            let w = (p * (1.0 - p)).max(f64::MIN_POSITIVE);
            let sw = w.sqrt();
            // Solving for the increment rather than the new coefficients keeps
            // the step accurate relative to its own size.
            zw[i] = (y[i] - p) / sw;
            for j in 0..k {
                xw[(i, j)] *= sw;
            }
        }
        let score = xw.transpose() * &zw;
        let step: Vec<f64> = xw
            .svd(true, true)
            .solve(&zw, 1e-14)
            .map_err(|e| Error::Numeric(format!("IRLS solve failed: {e}")))?
            .iter()
            .copied()
            .collect();

        // Predicted ascent of the Newton step; once it falls below the rounding
        // noise of the likelihood, comparing likelihoods can no longer judge it.
        let gain: f64 = score.iter().zip(&step).map(|(g, s)| g * s).sum();
        let within_noise = gain <= 1e3 * f64::EPSILON * ll.abs().max(1.0);

        if max_abs(step.iter().copied()) < opts.tol {
            // Below tolerance the likelihood difference is rounding noise, and
            // halving on it would stop short of the optimum.
            beta = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            ll = log_likelihood(train, &beta);
            converged = true;
            break;
        }
        // Step-halving keeps the likelihood non-decreasing.
        let mut scale = 1.0;
        let mut candidate: Vec<f64>;
        let mut cand_ll;
        let mut halvings = 0;
        loop {
            candidate = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            cand_ll = log_likelihood(train, &candidate);
            if cand_ll >= ll || within_noise || halvings >= 50 {
                break;
            }
            scale *= 0.5;
            halvings += 1;
        }
        if cand_ll < ll && !within_noise {
            // No ascent direction left at machine precision.
            converged = max_abs(step.iter().copied()) < opts.tol;
            break;
        }
        let change = max_abs(candidate.iter().zip(&beta).map(|(c, b)| c - b));
        beta = candidate;
        ll = cand_ll;

        if !beta.iter().all(|b| b.is_finite()) || max_abs(beta.iter().copied()) > SEPARATION_BOUND {
            return Err(Error::QuasiSeparation {
                iterations,
                partial: Box::new(partial(&beta, ll, iterations)),
            });
        }
        if change > last_step {
            growing += 1;
            if growing >= DIVERGING_STEPS {
                return Err(Error::QuasiSeparation {
                    iterations,
                    partial: Box::new(partial(&beta, ll, iterations)),
                });
            }
        } else {
            growing = 0;
        }
        last_step = change;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if ll > -1e-9 {
        // Every training row classified with probability ~1. Tiny steps here
        // come from vanishing weights, not from reaching an optimum.
        return Err(Error::QuasiSeparation {
            iterations,
            partial: Box::new(partial(&beta, ll, iterations)),
        });
    }

    Ok(LogitModel {
        feature_names: train.feature_names.clone(),
        coefficients: beta,
        converged,
        iterations,
        n_train: n,
        log_likelihood: ll,
    })
}

impl LogitModel {
    /// Predicted probability of passing; this is the running variable.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() + 1 != self.coefficients.len() {
            return Err(Error::Validation(format!(
                "model expects {} features, got {}",
                self.coefficients.len() - 1,
                features.len()
            )));
        }
        let p = logistic(linear_predictor(&self.coefficients, features));
        Ok(p.clamp(MIN_PROBABILITY, 1.0 - MIN_PROBABILITY))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(format!("model serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LogitModel =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("model file: {e}")))?;
        if m.coefficients.len() != m.feature_names.len() + 1 {
            return Err(Error::Validation(format!(
                "model file: {} coefficients for {} features",
                m.coefficients.len(),
                m.feature_names.len()
            )));
        }
        Ok(m)
    }
}

/// Predicts each student of the current cohort with the given feature selection.
pub fn predict_cohort(
    model: &LogitModel,
    cohort: &[StudentFeatures],
    selection: &[FeatureSpec],
) -> Result<Vec<(String, f64)>> {
    let names: Vec<String> = selection.iter().map(FeatureSpec::name).collect();
    if names != model.feature_names {
        return Err(Error::Validation(format!(
            "model features {:?} differ from selection {:?}",
            model.feature_names, names
        )));
    }
    cohort
        .iter()
        .map(|f| {
            let x = selection.iter().map(|s| s.extract(f)).collect::<Result<Vec<_>>>()?;
            Ok((f.student_id.clone(), model.predict(&x)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(rows: &[(&[f64], bool)]) -> TrainingSet {
        let k = rows[0].0.len();
        let mut t = TrainingSet::new((0..k).map(|j| format!("x{j}")).collect());
        for (x, y) in rows {
            t.push(x.to_vec(), *y).unwrap();
        }
        t
    }

    #[test]
    fn intercept_only_is_sample_mean() {
        let mut t = TrainingSet::new(vec![]);
        for i in 0..10 {
            t.push(vec![], i < 3).unwrap();
        }
        let m = fit_logit(&t, FitOptions::default()).unwrap();
        assert!(m.converged);
        assert_relative_eq!(m.predict(&[]).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn duplicating_rows_keeps_coefficients() {
        let rows: Vec<(Vec<f64>, bool)> = (0..20)
            .map(|i| (vec![i as f64 / 4.0], (i * 7) % 5 < 2 + i / 8))
            .collect();
        let mut once = TrainingSet::new(vec!["x".into()]);
        let mut twice = TrainingSet::new(vec!["x".into()]);
        for (x, y) in &rows {
            once.push(x.clone(), *y).unwrap();
            twice.push(x.clone(), *y).unwrap();
            twice.push(x.clone(), *y).unwrap();
        }
        let a = fit_logit(&once, FitOptions::default()).unwrap();
        let b = fit_logit(&twice, FitOptions::default()).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            assert_relative_eq!(*p, *q, max_relative = 1e-9);
        }
    }

    #[test]
    fn degenerate_and_separated() {
        let t = set(&[(&[1.0], true), (&[2.0], true), (&[3.0], true)]);
        assert!(matches!(fit_logit(&t, FitOptions::default()), Err(Error::DegenerateOutcome)));
        let sep = set(&[(&[1.0], false), (&[2.0], false), (&[3.0], true), (&[4.0], true)]);
        match fit_logit(&sep, FitOptions::default()) {
            Err(Error::QuasiSeparation { partial, .. }) => assert!(!partial.converged),
            other => panic!("expected quasi-separation, got {other:?}"),
        }
        let one = set(&[(&[1.0], false)]);
        assert!(fit_logit(&one, FitOptions::default()).is_err());
    }

    #[test]
    fn prediction_symmetry_and_bounds() {
        let m = LogitModel {
            feature_names: vec!["a".into(), "b".into()],
            coefficients: vec![0.0, 0.0, 0.0],
            converged: true,
            iterations: 0,
            n_train: 0,
            log_likelihood: 0.0,
        };
        assert_eq!(m.predict(&[3.0, -2.0]).unwrap(), 0.5);
        assert!(m.predict(&[1.0]).is_err());
        let pos = LogitModel { coefficients: vec![0.3, 1.2, -0.7], ..m.clone() };
        let neg = LogitModel { coefficients: vec![-0.3, -1.2, 0.7], ..m };
        let x = [0.8, 1.9];
        assert_relative_eq!(pos.predict(&x).unwrap() + neg.predict(&x).unwrap(), 1.0, epsilon = 1e-15);
        let mut last = 0.0;
        for i in 0..60 {
            let p = pos.predict(&[i as f64, 0.0]).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = LogitModel {
            feature_names: vec!["test_1".into()],
            coefficients: vec![0.1 + 0.2, -1.0 / 3.0],
            converged: true,
            iterations: 7,
            n_train: 99,
            log_likelihood: -12.345678901234567,
        };
        let back = LogitModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.coefficients.iter().zip(&m.coefficients) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn feature_spec_names_parse_back() {
        for s in ["test_3", "score_2019-06-25", "submissions_total"] {
            assert_eq!(s.parse::<FeatureSpec>().unwrap().name(), s);
        }
        assert!("test_9".parse::<FeatureSpec>().is_err());
    }
}
