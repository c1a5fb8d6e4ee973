use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// [`Error::kind`] gives a stable, machine-parseable tag for each variant,
/// which the command-line driver prints as an error prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: schema violation: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("levels not strictly increasing: {0}")]
    LevelOrder(String),
    #[error("level dimension inconsistency: {0}")]
    LevelDimensions(String),
    #[error("no such pyramid level {level} (slide has {available})")]
    NoSuchLevel { level: usize, available: usize },
    #[error(
        "target resolution {target_um} um/px is finer than the finest level ({finest_um} um/px)"
    )]
    ResolutionTooFine { target_um: f64, finest_um: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty tissue: {0}")]
    EmptyTissue(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("fewer patients ({patients}) than folds ({k})")]
    NotEnoughPatients { patients: usize, k: usize },
    #[error("non-finite loss at step {step}; state dumped to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },
    #[error("missing prediction for slide {0}")]
    MissingPrediction(String),
    #[error("tumour placement failed: {0}")]
    Placement(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{stage} failed for fold {fold}: {source}")]
    Stage {
        stage: &'static str,
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing-file",
            Error::Schema { .. } => "schema",
            Error::LevelOrder(_) => "level-order",
            Error::LevelDimensions(_) => "level-dimensions",
            Error::NoSuchLevel { .. } => "no-such-level",
            Error::ResolutionTooFine { .. } => "resolution",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::EmptyTissue(_) => "empty-tissue",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidConfig(_) => "invalid-config",
            Error::NotEnoughPatients { .. } => "not-enough-patients",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::MissingPrediction(_) => "missing-prediction",
            Error::Placement(_) => "placement",
            Error::EmptyInput(_) => "empty-input",
            Error::Png { .. } => "png",
            Error::Json { .. } => "json",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn stage(stage: &'static str, fold: usize, source: Error) -> Self {
        Error::Stage {
            stage,
            fold,
            source: Box::new(source),
        }
    }
}
