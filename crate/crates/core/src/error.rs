use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // label registry
    #[error("class registry is empty")]
    EmptyRegistry,
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("class name {0:?} may not contain commas or line breaks")]
    BadClassName(String),
    #[error("unknown class id {id} (registry has {num_classes} classes)")]
    UnknownClass { id: usize, num_classes: usize },

    // data pipeline
    #[error("class {0} has no files")]
    EmptyClass(usize),
    #[error("split ratios must be positive and sum to 1, got ({0}, {1}, {2})")]
    BadRatios(f64, f64, f64),
    #[error("path `{0}` appears more than once")]
    DuplicatePath(String),
    #[error("path {0:?} may not contain commas or line breaks")]
    BadPath(String),
    #[error("file list is empty")]
    EmptyFileList,
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("invalid preprocessing config: {0}")]
    BadPreprocessConfig(String),

    // models
    #[error("backbone provider error: {0}")]
    ProviderError(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("invalid model spec: {0}")]
    BadModelSpec(String),
    #[error("backbone checksum mismatch: checkpoint has {expected}, provider gave {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    // training
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    BadTrainConfig(String),

    // ensemble
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("ensemble weights are all zero")]
    DegenerateWeights,
    #[error("invalid ensemble weights: {0}")]
    BadWeights(String),
    #[error("validation accuracy must lie in (0, 100], got {0}")]
    BadAccuracy(f64),
    #[error("subset size {k} out of range 1..={m}")]
    BadSubsetSize { k: usize, m: usize },
    #[error("invalid probability matrix: {0}")]
    BadProbabilities(String),

    // metrics
    #[error("length mismatch: {truth} truth labels vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },

    // bench
    #[error("need {needed} images, got {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("latency must be positive, got {0} ms")]
    BadLatency(f64),
    #[error("no models to benchmark")]
    NoModels,

    // files and formats
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("registry hash mismatch: expected {expected}, found {found}")]
    RegistryMismatch { expected: String, found: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Name of the pipeline stage this error was raised in, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
