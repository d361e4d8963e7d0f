use thiserror::Error;

/// Broad failure classes. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or out-of-range input data.
    Input,
    /// The design cannot be estimated as requested (empty window, no instrument variation, ...).
    Validity,
    /// A numeric routine failed (singular system, non-finite result, divergence).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: u64,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate outcome: training outcomes contain a single class")]
    DegenerateOutcome,

    #[error("quasi-separation: coefficients diverge after {iterations} iterations")]
    QuasiSeparation {
        iterations: usize,
        partial: Box<crate::pass_model::LogitModel>,
    },

    #[error("design matrix is rank deficient: column {column} ({name}) is linearly dependent on earlier columns")]
    RankDeficient { column: usize, name: String },

    #[error("not enough observations: n = {n}, parameters = {k}")]
    InsufficientDof { n: usize, k: usize },

    #[error("instrument has no variation inside bandwidth")]
    NoInstrumentVariation,

    #[error("no observations in bandwidth {0}")]
    EmptyWindow(f64),

    #[error("design is fuzzy; use estimate_late ({0} noncompliers in window)")]
    FuzzyDesign(usize),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } => ErrorClass::Input,
            Error::DegenerateOutcome
            | Error::InsufficientDof { .. }
            | Error::NoInstrumentVariation
            | Error::EmptyWindow(_)
            | Error::FuzzyDesign(_)
            | Error::DegenerateDensity(_)
            | Error::InsufficientData(_)
            | Error::RankDeficient { .. } => ErrorClass::Validity,
            Error::QuasiSeparation { .. } | Error::Numeric(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
