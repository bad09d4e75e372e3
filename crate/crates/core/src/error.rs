use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: axis {axis} mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got rank {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("{op}: input is empty")]
    EmptyInput { op: &'static str },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("backward requires a scalar value, got {elements} elements")]
    NonScalarBackward { elements: usize },

    #[error("non-finite gradient produced by {op}")]
    NonFiniteGradient { op: &'static str },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("early-stopping metric is not finite")]
    NonFiniteMetric,

    #[error("unknown layer {name:?}; available: {available:?}")]
    UnknownLayer {
        name: String,
        available: Vec<String>,
    },

    #[error("saliency mask has no active pixels")]
    EmptyMask,

    #[error("container: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("container: unsupported version {version}")]
    UnsupportedVersion { version: u16 },

    #[error("container: truncated header at byte {offset}")]
    TruncatedHeader { offset: usize },

    #[error("container: truncated payload for entry {entry:?} (need {need} bytes, have {have})")]
    TruncatedPayload {
        entry: String,
        need: usize,
        have: usize,
    },

    #[error("container: duplicate entry name {name:?}")]
    DuplicateName { name: String },

    #[error("container: unknown dtype tag {tag}")]
    UnknownDtype { tag: u8 },

    #[error("container: entry {entry:?} declares an oversized payload")]
    OversizedEntry { entry: String },

    #[error("pgm: {message}")]
    PgmFormat { message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    FileFormat { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
