use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid box ({xmin}, {ymin}, {xmax}, {ymax})")]
    InvalidBox { xmin: f64, ymin: f64, xmax: f64, ymax: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed document at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("unsupported manifest schema {found:?}, expected {expected:?}")]
    SchemaVersion { found: String, expected: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("{path}: unsupported image format (magic {magic:?})")]
    Magic { path: PathBuf, magic: String },
    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corruption failed for {count} image(s); first: {first}")]
    Batch { count: usize, first: Box<ImageError> },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot encode box: {0}")]
    Encoding(String),
    #[error("non-finite loss on batch image {index}")]
    NonFiniteLoss { index: usize },
    #[error("training diverged at step {step}")]
    Divergence { step: u64 },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{path}: {message}")]
    Version { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation over an empty test set is undefined")]
    EmptyTestSet,
    #[error("class set mismatch: {0}")]
    ClassMismatch(String),
    #[error("detection dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub(crate) fn io_err<E>(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> E
where
    E: From<(PathBuf, std::io::Error)>,
{
    let path = path.into();
    move |source| E::from((path, source))
}

macro_rules! impl_io_from {
    ($($t:ty),*) => {$(
        impl From<(PathBuf, std::io::Error)> for $t {
            fn from((path, source): (PathBuf, std::io::Error)) -> Self {
                Self::Io { path, source }
            }
        }
    )*};
}

impl_io_from!(DataError, ImageError, DetectorError, EvalError, PipelineError);
