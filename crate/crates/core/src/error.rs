use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("negative sample {value} at index {index}")]
    NegativeSample { index: usize, value: f64 },

    #[error("image has zero width or height")]
    ZeroDimension,

    #[error("crop rectangle ({x0},{y0}) {w}x{h} exceeds {width}x{height} image")]
    OutOfBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),

    #[error("degenerate {which} kernel: weights sum to {sum:e}")]
    DegenerateKernel { which: &'static str, sum: f64 },

    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { found: i64, expected: i64 },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("input {width}x{height} is smaller than the discriminator receptive field")]
    InputTooSmall { width: usize, height: usize },

    #[error("image {index} is {width}x{height}, smaller than the {crop}x{crop} crop")]
    ImageTooSmall {
        index: usize,
        width: usize,
        height: usize,
        crop: usize,
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("parameter/gradient length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite gradient in `{0}`")]
    NanGradient(String),

    #[error("non-finite loss at step {step}; last good state checkpointed")]
    NanHalt { step: usize },

    #[error("histogram binning mismatch: {0} vs {1}")]
    BinningMismatch(String, String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
