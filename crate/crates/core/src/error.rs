use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("spatial dims {height}x{width} must be multiples of {multiple}")]
    NotDivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("shape: {0}")]
    Shape(String),

    #[error("input values must lie in [0, 1], found range [{min}, {max}]")]
    Range { min: f32, max: f32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("unknown generator variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),

    #[error("pretrained perceptual weights not found at {}", .0.display())]
    MissingWeights(PathBuf),

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("splits: {0}")]
    Split(String),

    #[error("training diverged at step {step} ({what}); last good checkpoint: {last_good}")]
    Diverged {
        step: u64,
        what: &'static str,
        last_good: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("variant {variant}: {source}")]
    Variant {
        variant: String,
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
}

pub type Result<T> = std::result::Result<T, Error>;
