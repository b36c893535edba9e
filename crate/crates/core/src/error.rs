use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Invalid(String),
    #[error("domain {domain} out of range for {n_domains} domains")]
    DomainOutOfRange { domain: usize, n_domains: usize },
    #[error("field `{field}`: id {id} out of range for cardinality {cardinality}")]
    IdOutOfRange { field: String, id: usize, cardinality: usize },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("numeric failure in phase {phase}: {message}")]
    Numeric { phase: u8, message: String },
    #[error("phase {phase}: frozen group {group} changed")]
    FreezeViolation { phase: u8, group: String },
    #[error("empty data: {0}")]
    Empty(String),
    #[error("every domain is single-class; weighted AUC is undefined")]
    AllDegenerate,
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numbers going bad during training rather
    /// than by invalid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::NonFinite { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
