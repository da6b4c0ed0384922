use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("face {face} is not a triangle ({count} vertices)")]
    NonTriangleFace { face: usize, count: usize },

    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },

    #[error("non-manifold edge ({0}, {1}) shared by more than two faces")]
    NonManifoldEdge(usize, usize),

    #[error("inconsistent orientation across edge ({0}, {1})")]
    InconsistentOrientation(usize, usize),

    #[error("boundary is not a simple cycle at vertex {0}")]
    NonSimpleBoundary(usize),

    #[error("degenerate face {face} (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checksum mismatch: expected {expected:016x}, found {found:016x}")]
    Checksum { expected: u64, found: u64 },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path} (produce it with `{producer}`)")]
    MissingArtifact { path: PathBuf, producer: &'static str },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Whether the failure is numeric (divergence, NaN, degenerate geometry)
    /// rather than a bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::EigenNonConvergence { .. }
                | Error::NonFinite(_)
                | Error::Degenerate(_)
                | Error::DegenerateFace { .. }
        )
    }
}
