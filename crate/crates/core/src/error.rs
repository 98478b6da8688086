use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed audio: {0}")]
    Format(String),
    #[error("unsupported channel count {0}; only mono input is accepted")]
    UnsupportedChannels(u16),
    #[error("utterance of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("style {style} has {count} utterances; at least 3 are needed to stratify")]
    Stratification { style: String, count: usize },
    #[error("{what} index {index} out of range (len {len})")]
    Bounds {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown {what}: {key}")]
    Lookup { what: &'static str, key: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite gradient in {param} at step {step}")]
    NonFinite { param: String, step: u64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
