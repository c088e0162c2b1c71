use std::path::PathBuf;

/// Errors produced by the reconstruction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("vertex {0} has no neighbors")]
    IsolatedVertex(usize),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("OFF line {line}: expected \"OFF\" header")]
    OffHeader { line: usize },

    #[error("OFF line {line}: face has {arity} vertices, only triangles are supported")]
    OffNonTriangularFace { line: usize, arity: usize },

    #[error("OFF line {line}: vertex index {index} out of range for {vertex_count} vertices")]
    OffIndexOutOfRange {
        line: usize,
        index: usize,
        vertex_count: usize,
    },

    #[error("OFF line {line}: {message}")]
    OffSyntax { line: usize, message: String },

    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("series has {len} samples, at least {min} are required")]
    TooFewSamples { len: usize, min: usize },

    #[error("explicit Euler step unstable: dt * D * max|diag| = {factor:.4} >= 1")]
    Unstable { factor: f64 },

    #[error("simulation blew up at step {step} (vertex {vertex}, u = {u}, v = {v})")]
    BlowUp { step: usize, vertex: usize, u: f64, v: f64 },

    #[error("sensor {sensor} coincides with heart vertex {vertex}")]
    SensorCoincident { sensor: usize, vertex: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("history covers {got} iterations, {needed} are required")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all-zero reference field: relative error is undefined")]
    ZeroReference,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
