use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("element {0} is not in the atom vocabulary")]
    NotInVocabulary(String),
    #[error("rotation is not orthogonal (max deviation {0:e})")]
    NotOrthogonal(f64),
    #[error("fingerprint radii differ ({0} vs {1})")]
    RadiusMismatch(usize, usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {t} outside [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("posterior normalizer is zero at step {0}")]
    ZeroNormalizer(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("missing property column `{0}`")]
    MissingColumn(String),
    #[error("unknown template placeholder `{0}`")]
    UnknownPlaceholder(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("{element} has no entry in the {table} contribution table")]
    MissingContribution { table: &'static str, element: String },
    #[error("length mismatch: {0} inputs vs {1} outputs")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
