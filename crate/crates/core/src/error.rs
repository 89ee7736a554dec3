use thiserror::Error;

use crate::taylor2::Taylor2Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taylor2(#[from] Taylor2Error),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("behavior policy has zero probability for action {action} in state {state}")]
    ZeroBehaviorProbability { state: usize, action: usize },
    #[error("enumeration needs {paths} paths, over the budget of {budget}; shrink the MDP (states, actions or horizon)")]
    EnumerationBudget { paths: String, budget: u64 },
    #[error(
        "TayPO order {0} has no exact evaluator; use the sub-sampled estimator for orders above 2"
    )]
    UnsupportedOrder(usize),
    #[error("ground-truth tensor has zero norm")]
    ZeroNormTruth,
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
