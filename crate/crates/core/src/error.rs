use thiserror::Error;

/// Errors raised by the surrogacy library.
#[derive(Debug, Error)]
pub enum SurrogacyError {
    #[error("malformed row at line {line}: column `{column}`: {message}")]
    MalformedRow {
        line: u64,
        column: String,
        message: String,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate contrast `{contrast_id}` in study `{study_id}`")]
    DuplicateContrast {
        study_id: String,
        contrast_id: String,
    },
    #[error("within-study covariance for study `{0}` is not positive semi-definite")]
    NotPositiveSemiDefinite(String),
    #[error("no published SUVR/Centiloid map for the tracers of study(ies): {}", .0.join(", "))]
    UnknownTracer(Vec<String>),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("contrasts mix outcomes ({0}); filter to a single outcome first")]
    MixedOutcome(String),
    #[error("contrasts mix surrogate scales; harmonize to a single scale first")]
    MixedScale,
    #[error("treatment `{0}` not present in the data")]
    UnknownTreatment(String),
    #[error("hierarchical models need at least two treatments, found one (`{0}`)")]
    SingleTreatment(String),
    #[error("treatment sets differ between subgroup and hierarchical fits: {0}")]
    TreatmentMismatch(String),
    #[error("missing covariate `{covariate}` for contrast `{contrast_id}` of study `{study_id}`")]
    MissingCovariate {
        covariate: String,
        study_id: String,
        contrast_id: String,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("no prediction records")]
    EmptyRecords,
    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),
    #[error("invalid MCMC settings: {0}")]
    InvalidSettings(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initial state of chain {0} is outside the posterior support")]
    InitOutOfSupport(usize),
    #[error("chain {chain} diverged at iteration {iteration}: {message}")]
    DivergentChain {
        chain: usize,
        iteration: usize,
        message: String,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("replicate {rep}: {source}")]
    Replicate {
        rep: usize,
        #[source]
        source: Box<SurrogacyError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SurrogacyError {
    /// True for problems with the input data or configuration, as opposed to
    /// sampler or internal failures.
    pub fn is_data_error(&self) -> bool {
        match self {
            SurrogacyError::DivergentChain { .. }
            | SurrogacyError::InitOutOfSupport(_)
            | SurrogacyError::Numerical(_)
            | SurrogacyError::Io(_)
            | SurrogacyError::Json(_) => false,
            SurrogacyError::Replicate { source, .. } => source.is_data_error(),
            _ => true,
        }
    }
}

pub type Result<T, E = SurrogacyError> = std::result::Result<T, E>;
