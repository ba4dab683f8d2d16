//! Error taxonomy shared across the crate.

use thiserror::Error;

/// All failures produced by this crate.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible matrix/vector dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A numerical computation failed or produced non-finite values.
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    /// An argument violated a documented precondition.
    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// An episode could not be built (e.g. an empty treatment arm).
    #[error("episode error: {0}")]
    Episode(String),

    /// Stratified sampling could not satisfy the requested counts.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Pseudo-CATE labeling failed for one task.
    #[error("labeling error for task {task}: {detail}")]
    Labeling { task: String, detail: String },

    /// Evaluation could not run (e.g. missing true-CATE column).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A task split could not be formed.
    #[error("split error: {0}")]
    Split(String),

    /// A task or config file failed to parse.
    #[error("parse error in {path} (line {line}): {detail}")]
    Parse {
        path: String,
        line: u64,
        detail: String,
    },

    /// A parsed file violated a schema invariant.
    #[error("validation error in {path}: {detail}")]
    Validation { path: String, detail: String },

    /// Filesystem failure with path context.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
