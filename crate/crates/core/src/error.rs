use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("amount {0} is not a level of the treatment grid")]
    NotOnGrid(f64),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape does not match network: {0}")]
    Tape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("data error: {0}")]
    Data(String),
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("treatment arm is empty: {0}")]
    EmptyArm(String),
    #[error("empty input")]
    EmptyInput,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("instance too large for the exact solver: {0}")]
    InstanceTooLarge(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotOnGrid(_) => "not_on_grid",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Tape(_) => "tape",
            Error::EmptyBatch => "empty_batch",
            Error::Data(_) => "data",
            Error::DegenerateLabels => "degenerate_labels",
            Error::EmptyArm(_) => "empty_arm",
            Error::EmptyInput => "empty_input",
            Error::Infeasible(_) => "infeasible",
            Error::InstanceTooLarge(_) => "instance_too_large",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
