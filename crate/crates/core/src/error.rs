use thiserror::Error;

pub type Result<T, E = FerretError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FerretError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric error at index {index}: {message}")]
    Numeric { index: usize, message: String },

    #[error("infeasible budget: K = {total} cannot cover {blocks} blocks (capacity {capacity})")]
    InfeasibleBudget {
        total: usize,
        blocks: usize,
        capacity: usize,
    },

    #[error("local training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("data partition error: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FerretError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FerretError {
    pub(crate) fn numeric(index: usize, message: impl Into<String>) -> Self {
        FerretError::Numeric {
            index,
            message: message.into(),
        }
    }

    /// Strips round annotations to get at the underlying failure.
    pub fn root_cause(&self) -> &FerretError {
        match self {
            FerretError::Round { source, .. } => source.root_cause(),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self.root_cause(),
            FerretError::Diverged { .. } | FerretError::Numeric { .. }
        )
    }
}
