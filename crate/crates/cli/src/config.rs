//! Run configuration: a TOML key-value file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::Args;
use serde::{Deserialize, Serialize};

use earlywarn::cohort::{FeatureConfig, GradeScale};
use earlywarn::pass_model::FeatureSpec;
use earlywarn::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthChoice {
    Fixed(f64),
    Named(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

impl BandwidthChoice {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(BandwidthChoice::Named(AutoKeyword::Auto));
        }
        s.parse::<f64>()
            .ok()
            .filter(|h| *h > 0.0 && h.is_finite())
            .map(BandwidthChoice::Fixed)
            .ok_or_else(|| format!("bandwidth must be a positive number or `auto`, got `{s}`"))
    }

    pub fn fixed(self) -> Option<f64> {
        match self {
            BandwidthChoice::Fixed(h) => Some(h),
            BandwidthChoice::Named(AutoKeyword::Auto) => None,
        }
    }
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Named(AutoKeyword::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub submissions: Option<PathBuf>,
    pub tests: Option<PathBuf>,
    pub exams: Option<PathBuf>,
    pub train_submissions: Option<PathBuf>,
    pub train_tests: Option<PathBuf>,
    pub train_exams: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub overrides: Option<PathBuf>,
    pub analysis: Option<PathBuf>,
    pub dgp: Option<PathBuf>,
    pub out: PathBuf,

    pub cutoff: f64,
    pub severe_cutoff: Option<f64>,
    pub bandwidth: BandwidthChoice,
    pub use_covariates: bool,
    pub slope_change: bool,
    pub multipliers: Vec<f64>,
    pub robust_se: bool,
    pub f_test_reduced_form: bool,
    pub bin_width: f64,
    pub mccrary_bin_width: Option<f64>,
    pub mccrary_bandwidth: Option<f64>,

    pub features: Vec<String>,
    pub exclude_no_shows: bool,
    pub score_dates: Vec<String>,
    pub periods: Vec<[String; 2]>,
    pub begun_dates: Vec<String>,
    pub covariate_tests: Vec<u8>,
    pub grade_scale: GradeScale,

    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            submissions: None,
            tests: None,
            exams: None,
            train_submissions: None,
            train_tests: None,
            train_exams: None,
            model: None,
            predictions: None,
            overrides: None,
            analysis: None,
            dgp: None,
            out: PathBuf::from("out"),
            cutoff: earlywarn::treatment::DEFAULT_CUTOFF,
            severe_cutoff: None,
            bandwidth: BandwidthChoice::default(),
            use_covariates: true,
            slope_change: true,
            multipliers: vec![1.0, 0.5, 2.0],
            robust_se: false,
            f_test_reduced_form: false,
            bin_width: 0.05,
            mccrary_bin_width: None,
            mccrary_bandwidth: None,
            features: FeatureSpec::default_selection().iter().map(FeatureSpec::name).collect(),
            exclude_no_shows: false,
            score_dates: Vec::new(),
            periods: Vec::new(),
            begun_dates: Vec::new(),
            covariate_tests: vec![1, 2, 3, 4],
            grade_scale: GradeScale::default(),
            seed: None,
            threads: None,
        }
    }
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cutoff: Option<f64>,
    /// Bandwidth for the local regression, a number or `auto`.
    #[arg(long, global = true, value_parser = BandwidthChoice::parse)]
    pub bandwidth: Option<BandwidthChoice>,
    #[arg(long, global = true)]
    pub no_covariates: bool,
    /// Comma-separated bandwidth multipliers, e.g. `1,0.5,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub multipliers: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[arg(long, global = true)]
    pub submissions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tests: Option<PathBuf>,
    #[arg(long, global = true)]
    pub exams: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_submissions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_tests: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_exams: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub overrides: Option<PathBuf>,
    #[arg(long, global = true)]
    pub analysis: Option<PathBuf>,
    /// Synthetic data-generating process (TOML).
    #[arg(long, global = true)]
    pub dgp: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(flags: &Overrides) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = read_to_string(path)?;
                let mut cfg: RunConfig = toml::from_str(&text)
                    .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                // Relative paths in the file are relative to the file.
                let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
                cfg.rebase(&base);
                cfg
            }
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = flags.$field.clone() { cfg.$field = Some(v); })*
            };
        }
        take!(
            submissions, tests, exams, train_submissions, train_tests, train_exams, model,
            predictions, overrides, analysis, dgp, seed, threads
        );
        if let Some(c) = flags.cutoff {
            cfg.cutoff = c;
        }
        if let Some(b) = flags.bandwidth {
            cfg.bandwidth = b;
        }
        if flags.no_covariates {
            cfg.use_covariates = false;
        }
        if let Some(m) = &flags.multipliers {
            cfg.multipliers = m.clone();
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for p in [
            &mut self.submissions,
            &mut self.tests,
            &mut self.exams,
            &mut self.train_submissions,
            &mut self.train_tests,
            &mut self.train_exams,
            &mut self.model,
            &mut self.predictions,
            &mut self.overrides,
            &mut self.analysis,
            &mut self.dgp,
        ] {
            fix(p);
        }
        if self.out.is_relative() {
            self.out = base.join(&self.out);
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Validation(format!("no {what} file given (use --{what} or the config file)")))
    }

    pub fn feature_config(&self) -> Result<FeatureConfig> {
        let date = |s: &String| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| Error::Validation(format!("date `{s}` is not YYYY-MM-DD")))
        };
        Ok(FeatureConfig {
            score_dates: self.score_dates.iter().map(date).collect::<Result<_>>()?,
            periods: self
                .periods
                .iter()
                .map(|[a, b]| Ok((date(a)?, date(b)?)))
                .collect::<Result<_>>()?,
            begun_dates: self.begun_dates.iter().map(date).collect::<Result<_>>()?,
            covariate_tests: self.covariate_tests.clone(),
            grade_scale: self.grade_scale,
        })
    }

    pub fn feature_selection(&self) -> Result<Vec<FeatureSpec>> {
        self.features.iter().map(|s| s.parse()).collect()
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
