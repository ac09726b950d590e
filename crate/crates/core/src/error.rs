use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::RunManifest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A count or index outside its legal range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// The caller used an operation outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape error: {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("box too small: {w_px}x{h_px}px, {what} needs at least {min_w}x{min_h}px")]
    BoxTooSmall {
        w_px: u32,
        h_px: u32,
        min_w: u32,
        min_h: u32,
        what: &'static str,
    },

    #[error("element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure at epoch {epoch}: {message}")]
    Numeric { epoch: usize, message: String },

    #[error("quota shortfall: {selected} of {quota} pages selected after {rounds} rounds")]
    QuotaShortfall {
        quota: usize,
        selected: usize,
        rounds: usize,
        manifest: Box<RunManifest>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Bounds(_) => "bounds",
            Error::Usage(_) => "usage",
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Data(_) => "data",
            Error::Input(_) => "input",
            Error::BoxTooSmall { .. } => "box_too_small",
            Error::Element { source, .. } => source.kind(),
            Error::Numeric { .. } => "numeric",
            Error::QuotaShortfall { .. } => "quota_shortfall",
        }
    }

    /// Process exit status: 2 usage, 3 data, 4 quota shortfall, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Bounds(_) | Error::Shape { .. } => 2,
            Error::Numeric { .. } => 5,
            Error::QuotaShortfall { .. } => 4,
            Error::Element { source, .. } => source.exit_code(),
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Data(_)
            | Error::Input(_)
            | Error::BoxTooSmall { .. } => 3,
        }
    }
}
