use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input too short: {len} frames, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("all keys are masked")]
    AllKeysMasked,

    #[error("alignment infeasible: transcript of {entries} entries over {frames} frames")]
    Infeasible { entries: usize, frames: usize },

    #[error("empty transcript")]
    EmptyTranscript,

    #[error("transcript of length {len} exceeds {max} slots")]
    TranscriptTooLong { len: usize, max: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: bad magic {found:?}", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{}: corrupt file: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },

    #[error("{}:{line}: unknown class {token:?}", path.display())]
    UnknownClass {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("{}: length mismatch: {labels} labels for {frames} frames", path.display())]
    LengthMismatch {
        path: PathBuf,
        labels: usize,
        frames: usize,
    },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step} (video {video}): L_I={loss_i}, L_T={loss_t}")]
    NonFinite {
        step: usize,
        video: String,
        loss_i: f64,
        loss_t: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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

    /// Whether the failure comes from user input files rather than programming or numeric faults.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::BadMagic { .. }
                | Error::Corrupt { .. }
                | Error::UnknownClass { .. }
                | Error::LengthMismatch { .. }
                | Error::Incompatible(_)
                | Error::Io { .. }
                | Error::InputTooShort { .. }
                | Error::Infeasible { .. }
                | Error::EmptyTranscript
        )
    }
}
