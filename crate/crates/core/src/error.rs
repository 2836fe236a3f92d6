use std::path::PathBuf;

use thiserror::Error;

use crate::embedding_store::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // embedding store
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("cannot parse manifest: {0}")]
    ManifestParse(String),
    #[error("shape mismatch in {path}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset failed validation: {0}")]
    ValidationFailure(ValidationReport),
    #[error("zero-norm vector")]
    ZeroVector,

    // sub-text metrics
    #[error("at least two sub-texts are required, found {0}")]
    NeedTwoSubtexts(usize),
    #[error("no candidate sub-text groups")]
    EmptyCandidates,
    #[error("class {class}: {source}")]
    InClass {
        class: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid scaler: {0}")]
    BadScaler(String),

    // alignment
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("class has no sub-texts")]
    EmptySubtexts,
    #[error("class list is empty")]
    EmptyClassList,

    // training
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("gradient check sampled no coordinates")]
    EmptySample,
    #[error("parameter shapes do not match: {0}")]
    ParamShapeMismatch(String),
    #[error("invalid training config: {0}")]
    TrainConfigInvalid(String),

    // evaluation
    #[error("k = {k} is outside 1..={classes}")]
    BadK { k: usize, classes: usize },
    #[error("video {0} has an empty label set")]
    EmptyLabelSet(usize),
    #[error("invalid synthetic config: {0}")]
    ConfigInvalid(String),
    #[error("evaluation classes overlap training classes: {0:?}")]
    ClassOverlap(Vec<String>),
    #[error("class {class} has {found} videos, needs more than {shots}")]
    InsufficientVideos {
        class: usize,
        found: usize,
        shots: usize,
    },
    #[error("correlation study needs at least three candidate groups, found {0}")]
    NeedThreeGroups(usize),
    #[error("zero variance in {0}, correlation undefined")]
    DegenerateVariance(&'static str),
}

impl Error {
    /// Name of the module that raised the error, used to qualify CLI messages.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            MissingFile(_)
            | ManifestParse(_)
            | ShapeMismatch { .. }
            | NonFinite(_)
            | IoFailure { .. }
            | ValidationFailure(_)
            | ZeroVector => "embedding_store",
            NeedTwoSubtexts(_) | EmptyCandidates | BadScaler(_) => "subtext_metrics",
            InClass { source, .. } => source.module(),
            DimMismatch(_) | EmptySubtexts | EmptyClassList => "alignment",
            NonFiniteGradient(_) | EmptySample | ParamShapeMismatch(_) | TrainConfigInvalid(_) => {
                "training"
            }
            BadK { .. }
            | EmptyLabelSet(_)
            | ConfigInvalid(_)
            | ClassOverlap(_)
            | InsufficientVideos { .. }
            | NeedThreeGroups(_)
            | DegenerateVariance(_) => "eval",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::IoFailure { path, source }
        }
    }

    pub fn in_class(class: usize) -> impl FnOnce(Error) -> Error {
        move |e| Error::InClass {
            class,
            source: Box::new(e),
        }
    }
}
