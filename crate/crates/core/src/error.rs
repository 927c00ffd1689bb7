use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix is singular (reciprocal condition {rcond:.3e})")]
    Singular { rcond: f64 },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("non-finite model output at coordinate {coordinate} while differentiating")]
    NonFinite { coordinate: usize },
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("innovation covariance is singular (reciprocal condition {rcond:.3e})")]
    SingularInnovation { rcond: f64 },
    #[error("jacobian step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("network spec has no layers")]
    EmptySpec,
    #[error("layer {layer}: expected input of width {expected}, found {found}")]
    Dimension {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("trace has {trace} layers but network has {params}")]
    TraceMismatch { trace: usize, params: usize },
    #[error("non-finite gradient in layer {layer}; update rejected")]
    NonFiniteGradient { layer: usize },
    #[error("learning rate must be non-negative and finite, got {0}")]
    BadLearningRate(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("client {client}: {op} called out of order (state: {state})")]
    OutOfOrder {
        client: usize,
        op: &'static str,
        state: &'static str,
    },
    #[error("round {round}: no message from client {client}")]
    MissingClient { round: usize, client: usize },
    #[error("round {round}: client {client} wrote its mailbox twice")]
    DuplicateMessage { round: usize, client: usize },
    #[error("round {round}: missing observation for client {client}")]
    MissingObservation { round: usize, client: usize },
    #[error("gradient for client {client} delivered before the server barrier of round {round}")]
    BeforeBarrier { round: usize, client: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("clip norm must be positive, got {0}")]
    ClipNorm(f64),
    #[error("probability must lie in [0, 1], got {0}")]
    Probability(f64),
    #[error("sigma must be non-negative and finite, got {0}")]
    Sigma(f64),
    #[error("cannot compose an empty list of budgets")]
    EmptyComposition,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("need at least {needed} residual samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("cannot calibrate a threshold from an empty stream")]
    EmptyStream,
    #[error("percentile must lie in (0, 100], got {0}")]
    Percentile(f64),
    #[error("residual dimension {found} does not match statistics dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("no flag report from client {0}")]
    MissingReport(usize),
    #[error("cannot perform RCA: {0} flags are absent")]
    RcaUnavailable(&'static str),
    #[error("no anomaly episodes to score")]
    NoEpisodes,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("trajectory diverged at step {step} (|x| = {norm:.3e}); try smaller map gains")]
    Divergent { step: usize, norm: f64 },
    #[error("client index {index} out of range for {clients} clients")]
    ClientIndex { index: usize, clients: usize },
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }
}
