use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("SVD failed to converge for a {rows}x{cols} matrix")]
    SpectralFailure { rows: usize, cols: usize },

    #[error("degenerate hard-negative mix: convex combination has zero norm")]
    DegenerateMix,

    #[error("cannot normalize a zero-norm vector")]
    DegenerateNorm,

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("CRC mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { offset: usize, stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("malformed file at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training step {step} failed: {msg}")]
    Step { step: u64, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
