//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by tensor ops, training, and the data pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up; both shapes are named.
    #[error("shape mismatch: {op} expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A configuration field failed validation.
    #[error("invalid config: {0}")]
    Config(String),
    /// Fewer data points than the fit requires.
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    /// Non-finite value where finite input is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// A gradient went non-finite during optimization.
    #[error("training diverged: non-finite gradient for parameter `{0}`")]
    TrainingDiverged(String),
    /// A code fell outside the embedding vocabulary.
    #[error("code {code} out of range for vocabulary of size {vocab}")]
    Vocabulary { code: usize, vocab: usize },
    /// Paired sequences disagree in length by more than one frame.
    #[error("alignment error{}: lengths {left} vs {right}", fmt_ctx(.context))]
    Alignment {
        context: String,
        left: usize,
        right: usize,
    },
    /// Input was empty where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),
    /// The metric is undefined for this input (e.g. a single-phone corpus).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

fn fmt_ctx(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        alloc::format!(" ({ctx})")
    }
}

pub type Result<T> = core::result::Result<T, Error>;
