use thiserror::Error;

pub type Result<T, E = FpwError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FpwError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quantile knot placement needs data, got an empty slice")]
    EmptyData,

    #[error("degenerate boundary interval [{lower}, {upper}]")]
    DegenerateInterval { lower: f64, upper: f64 },

    #[error("basis spec has no knot vector; call make_knots first")]
    KnotsNotBuilt,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("design matrix has rank zero (all rows masked or zero)")]
    RankZero,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("singular Gram matrix in {0}")]
    SingularGram(&'static str),

    #[error("sample has no selected observations")]
    NoSelected,

    #[error("need at least {needed} selected observations, found {found}")]
    TooFewSelected { needed: usize, found: usize },

    #[error("selection coefficients violate the sieve constraints by {violation:e}")]
    Infeasible { violation: f64 },

    #[error("estimated conditional inverse probability is non-positive ({value:e}) at selected observation {index}")]
    NonPositiveInverseProbability { index: usize, value: f64 },

    #[error("{failed} of {total} replications failed, above the 5% abort threshold")]
    TooManyFailures { failed: usize, total: usize },

    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl FpwError {
    /// True for failures of the estimation machinery itself, as opposed to
    /// malformed input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FpwError::RankZero
                | FpwError::NotSymmetric(_)
                | FpwError::SingularGram(_)
                | FpwError::Infeasible { .. }
                | FpwError::NonPositiveInverseProbability { .. }
                | FpwError::TooManyFailures { .. }
        )
    }
}
