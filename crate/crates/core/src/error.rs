use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: {what} (expected {expected}, got {got})")]
    LayerDimension {
        layer: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class index {index} out of range for {classes} classes (example {example})")]
    ClassOutOfRange { example: usize, index: usize, classes: usize },
    #[error("trace was recorded at network version {trace}, network is now at {net}")]
    StaleTrace { trace: u64, net: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("size cap exceeded: {what} = {got} > {cap}")]
    SizeCap { what: &'static str, got: usize, cap: usize },
    #[error("solver {solver} cannot run on a {operator} operator")]
    SolverMismatch { solver: &'static str, operator: &'static str },
    #[error("non-finite CG iterate at iteration {iteration} (operator may be indefinite)")]
    CgBreakdown { iteration: usize },
    #[error("inner loop produced a non-finite loss at step {step}")]
    InnerDiverged {
        step: usize,
        last_theta: nalgebra::DVector<f64>,
    },
    #[error("task does not support {0}")]
    Unsupported(&'static str),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad container: {0}")]
    Format(String),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}
