use std::path::PathBuf;

/// Errors raised anywhere in the search / preference-learning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("prompt synthesis failed: no solvable prompt after {attempts} attempts (start {start_range:?}, target {target_range:?}, budget {budget})")]
    SynthesisFailed {
        attempts: usize,
        start_range: (i64, i64),
        target_range: (i64, i64),
        budget: u32,
    },

    #[error("action {action} out of range for a vocabulary of {vocab_size} operations")]
    ActionOutOfRange { action: usize, vocab_size: usize },

    #[error("cannot step from a terminal state (current {current}, steps taken {steps_taken})")]
    TerminalState { current: i64, steps_taken: u32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no terminal trajectory in the search tree of prompt {prompt_id}")]
    NoTrajectory { prompt_id: u64 },

    #[error("empty preference buffer: no pair cleared the margin tau = {tau}; try a smaller tau")]
    EmptyBuffer { tau: f64 },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("unknown prompt id {0}")]
    UnknownPrompt(u64),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("seed conflict: {0}")]
    SeedConflict(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
