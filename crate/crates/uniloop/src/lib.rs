//! A small decoder-only transformer reads multimodal context, decodes a
//! chain of thought into a loop state, and a shared-attention flow-matching
//! generator denoises future frames and actions from that state. Everything
//! runs closed-loop in a deterministic 2D tabletop world.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod tape;
pub mod training;
pub mod world;

/// Crate-wide error type. `User` variants map to exit code 1, everything
/// else to exit code 2 at the CLI boundary.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad input: {0}")]
    User(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}` unachievable in current state: {reason}")]
    Unachievable { task: String, reason: String },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("data format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: non-finite loss (batch {batch:?})")]
    NonFinite { step: usize, batch: Vec<usize> },
    #[error("evaluation refused: {0}")]
    Refused(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code this error maps to at the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::User(_) | Error::UnknownTask(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
