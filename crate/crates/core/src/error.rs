use std::path::PathBuf;

/// Crate-wide error type. Every fallible operation funnels into this so the
/// CLI can map failures onto its documented exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("degenerate latent at row {row}: norm {norm:e} <= {floor:e}")]
    DegenerateLatent { row: usize, norm: f64, floor: f64 },

    #[error("backward on tensor with {numel} elements; loss must be a single scalar")]
    BackwardNonScalar { numel: usize },

    #[error("backward on a tensor with no tape (leaf or untracked result)")]
    BackwardNoTape,

    #[error("{0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{msg} at offset {offset}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint/arch mismatch: first differing tensor {name}: {detail}")]
    ArchMismatch { name: String, detail: String },

    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl Error {
    /// Exit code used by the CLI: 2 config, 3 IO/format, 4 shape/arch, 5 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::ShapeMismatch { .. } | Error::ArchMismatch { .. } | Error::Empty(_) => 4,
            Error::InvalidInput(_) => 4,
            Error::NonFinite { .. }
            | Error::DegenerateLatent { .. }
            | Error::BackwardNonScalar { .. }
            | Error::BackwardNoTape
            | Error::Numerical(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
