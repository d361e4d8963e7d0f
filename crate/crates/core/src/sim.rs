//! Synthetic cohorts with a known treatment effect.
//!
//! Generation is a single ChaCha20 stream seeded with `seed`, so a spec and a
//! seed fully determine the dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::treatment::{round_running_variable, AnalysisRow};

pub const GENERATOR: &str = "ChaCha20Rng (rand_chacha 0.9) seeded by seed_from_u64; normals via rand_distr::StandardNormal";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WDistribution {
    Uniform,
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    /// P(T = 1 | Z = 1).
    pub p_below: f64,
    /// P(T = 1 | Z = 0).
    pub p_above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    pub true_late: f64,
    /// Polynomial coefficients of `E[Y | W, T = 0]` in `W`, constant first.
    pub baseline: Vec<f64>,
    pub compliance: Compliance,
    pub noise_sd: f64,
    #[serde(default = "default_w")]
    pub w_distribution: WDistribution,
    /// Share of draws in `(c, c + manipulation_width]` reflected below the cutoff.
    #[serde(default)]
    pub manipulation: Option<f64>,
    #[serde(default = "default_manipulation_width")]
    pub manipulation_width: f64,
    /// Slope of the effect in `W - c`; zero gives a constant effect.
    #[serde(default)]
    pub effect_slope: f64,
    /// `X = covariate_scale * W + covariate_sd * noise`.
    #[serde(default = "default_covariate_scale")]
    pub covariate_scale: f64,
    /// Nonzero by default: with `covariate_sd = 0` the covariate is collinear with `W`.
    #[serde(default = "default_covariate_sd")]
    pub covariate_sd: f64,
    pub seed: u64,
}

fn default_cutoff() -> f64 {
    crate::treatment::DEFAULT_CUTOFF
}
fn default_w() -> WDistribution {
    WDistribution::Uniform
}
fn default_manipulation_width() -> f64 {
    0.05
}
fn default_covariate_scale() -> f64 {
    1600.0
}
fn default_covariate_sd() -> f64 {
    100.0
}

impl DgpSpec {
    /// A fuzzy design with a linear baseline, the shape used by the recovery checks.
    pub fn fuzzy(n: usize, true_late: f64, seed: u64) -> Self {
        DgpSpec {
            n,
            cutoff: 0.4,
            true_late,
            baseline: vec![10.0, 30.0],
            compliance: Compliance { p_below: 0.9, p_above: 0.1 },
            noise_sd: 5.0,
            w_distribution: WDistribution::Uniform,
            manipulation: None,
            manipulation_width: 0.05,
            effect_slope: 0.0,
            covariate_scale: 1600.0,
            covariate_sd: 100.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return bad(format!("cutoff {} outside (0, 1)", self.cutoff));
        }
        let Compliance { p_below, p_above } = self.compliance;
        if !(0.0 <= p_above && p_above < p_below && p_below <= 1.0) {
            return bad(format!(
                "compliance requires 0 <= p_above < p_below <= 1, got ({p_below}, {p_above})"
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || !(self.covariate_sd >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if let Some(m) = self.manipulation {
            if !(0.0..0.5).contains(&m) {
                return bad(format!("manipulation fraction {m} outside [0, 0.5)"));
            }
            if !(self.manipulation_width > 0.0) {
                return bad("manipulation width must be positive".into());
            }
        }
        if let WDistribution::Beta { a, b } = self.w_distribution {
            if !(a > 0.0 && b > 0.0) {
                return bad(format!("beta parameters ({a}, {b}) must be positive"));
            }
        }
        if self.baseline.iter().any(|c| !c.is_finite()) || !self.true_late.is_finite() {
            return bad("baseline and effect must be finite".into());
        }
        Ok(())
    }

    fn baseline_at(&self, w: f64) -> f64 {
        self.baseline.iter().rev().fold(0.0, |acc, c| acc * w + c)
    }
}

/// The effect the pipeline should recover: the constant effect of the construction.
pub fn true_late(spec: &DgpSpec) -> f64 {
    spec.true_late
}

fn draw_w(rng: &mut ChaCha20Rng, beta: Option<&Beta<f64>>) -> f64 {
    loop {
        let raw = match beta {
            Some(b) => b.sample(rng),
            None => rng.random::<f64>(),
        };
        let w = round_running_variable(raw);
        if w > 0.0 && w < 1.0 {
            return w;
        }
    }
}

pub fn generate(spec: &DgpSpec) -> Result<Vec<AnalysisRow>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let beta = match spec.w_distribution {
        WDistribution::Beta { a, b } => {
            Some(Beta::new(a, b).map_err(|e| Error::Validation(format!("beta distribution: {e}")))?)
        }
        WDistribution::Uniform => None,
    };
    let c = spec.cutoff;
    let width = (spec.n.max(1) as f64).log10().ceil() as usize + 1;
    let rows = (0..spec.n)
        .map(|i| {
            let mut w = draw_w(&mut rng, beta.as_ref());
            let shift: f64 = rng.random();
            if let Some(frac) = spec.manipulation {
                if w > c && w <= c + spec.manipulation_width && shift < frac {
                    let moved = round_running_variable(2.0 * c - w);
                    if moved > 0.0 {
                        w = moved;
                    }
                }
            }
            let z = w <= c;
            let p_t = if z { spec.compliance.p_below } else { spec.compliance.p_above };
            let t = rng.random::<f64>() < p_t;
            let e_x: f64 = rng.sample(StandardNormal);
            let e_y: f64 = rng.sample(StandardNormal);
            let effect = spec.true_late + spec.effect_slope * (w - c);
            let y = spec.baseline_at(w) + if t { effect } else { 0.0 } + spec.noise_sd * e_y;
            AnalysisRow {
                student_id: format!("sim{i:0width$}"),
                w,
                z,
                t,
                y,
                x: spec.covariate_scale * w + spec.covariate_sd * e_x,
                attended: true,
            }
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub true_late: f64,
    pub generator: String,
    pub spec: DgpSpec,
}

impl Truth {
    pub fn of(spec: &DgpSpec) -> Self {
        Truth {
            true_late: true_late(spec),
            generator: GENERATOR.into(),
            spec: spec.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sharp_construction() {
        let spec = DgpSpec {
            baseline: vec![10.0],
            compliance: Compliance { p_below: 1.0, p_above: 0.0 },
            noise_sd: 0.0,
            ..DgpSpec::fuzzy(300, 5.0, 3)
        };
        for r in generate(&spec).unwrap() {
            assert_eq!(r.t, r.z);
            assert_eq!(r.y, if r.t { 15.0 } else { 10.0 });
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = DgpSpec::fuzzy(500, 5.0, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DgpSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn compliance_share_concentrates() {
        let spec = DgpSpec {
            compliance: Compliance { p_below: 0.8, p_above: 0.2 },
            ..DgpSpec::fuzzy(10_000, 5.0, 9)
        };
        let rows = generate(&spec).unwrap();
        let below: Vec<_> = rows.iter().filter(|r| r.z).collect();
        let share = below.iter().filter(|r| r.t).count() as f64 / below.len() as f64;
        assert!((share - 0.8).abs() < 0.02, "{share}");
    }

    #[test]
    fn first_stage_jump_matches_compliance_gap() {
        let rows = generate(&DgpSpec::fuzzy(100_000, 5.0, 5)).unwrap();
        let share = |z: bool| {
            let side: Vec<_> = rows.iter().filter(|r| r.z == z).collect();
            side.iter().filter(|r| r.t).count() as f64 / side.len() as f64
        };
        assert!((share(true) - share(false) - 0.8).abs() < 0.01);
    }

    #[test]
    fn true_late_echoes_spec() {
        assert_eq!(true_late(&DgpSpec::fuzzy(10, 5.0, 1)), 5.0);
        assert_eq!(true_late(&DgpSpec::fuzzy(10, 0.0, 1)), 0.0);
    }

    #[test]
    fn invalid_specs() {
        let base = DgpSpec::fuzzy(10, 1.0, 1);
        let inverted = DgpSpec { compliance: Compliance { p_below: 0.2, p_above: 0.3 }, ..base.clone() };
        assert!(generate(&inverted).is_err());
        let manip = DgpSpec { manipulation: Some(0.5), ..base.clone() };
        assert!(generate(&manip).is_err());
        assert!(generate(&DgpSpec { n: 0, ..base }).is_err());
    }

    #[test]
    fn manipulation_moves_mass_below() {
        let clean = DgpSpec::fuzzy(20_000, 0.0, 8);
        let manip = DgpSpec { manipulation: Some(0.4), ..clean.clone() };
        let count = |rows: &[AnalysisRow]| rows.iter().filter(|r| r.w > 0.4 && r.w <= 0.45).count();
        let a = count(&generate(&clean).unwrap()) as f64;
        let b = count(&generate(&manip).unwrap()) as f64;
        assert!((b / a - 0.6).abs() < 0.05, "{}", b / a);
    }
}
