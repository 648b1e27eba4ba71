use thiserror::Error;

use crate::domain::{RecordId, TaskStatus};

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("illegal transition of record {record}: {from} -> {to}")]
    IllegalTransition { record: RecordId, from: TaskStatus, to: TaskStatus },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("scenario has {} violation(s): {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<crate::domain::Violation>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
