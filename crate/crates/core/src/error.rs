use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward requires a gradient-tracked loss")]
    UntrackedLoss,

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate corpus configuration: {0}")]
    Degenerate(String),

    #[error("instance too large for exhaustive enumeration: {0} label sequences")]
    TooLarge(u128),

    #[error("non-finite {term} loss at step {step}: {value}")]
    NonFiniteLoss {
        term: &'static str,
        step: u64,
        value: f64,
    },

    #[error("ODE trajectory became non-finite at step {step}")]
    NonFiniteTrajectory { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Errors caused by bad user input (configs, arguments, files) rather
    /// than by a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Degenerate(_) | Error::Format(_)
        )
    }
}
