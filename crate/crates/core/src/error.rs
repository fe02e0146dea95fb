//! Error type shared by every module in the kernel.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Failures surfaced by kernel operations.
///
/// Variants are deliberately coarse: callers either propagate them or,
/// in the case of [`CoreError::InfeasibleLabel`] /
/// [`CoreError::SequenceTooShort`], skip the offending utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes do not conform for the requested operation.
    ShapeMismatch { context: &'static str, expected: String, got: String },
    /// An input sequence is shorter than the operation's receptive span.
    SequenceTooShort { needed: usize, got: usize },
    /// The label cannot be aligned to the available frames.
    InfeasibleLabel { frames: usize, required: usize },
    /// Brute-force enumeration would exceed its instance-size guard.
    EnumerationGuard { paths: u64, limit: u64 },
    /// An optimizer step found no gradient where one was required.
    MissingGrad { name: String },
    /// A parameter name was inserted twice.
    DuplicateName { name: String },
    /// A configuration value violates its documented invariant.
    InvalidConfig(String),
    /// Dataset-level inconsistency (id collisions and the like).
    InvalidData(String),
    /// A binary payload failed to decode; `offset` is the byte position.
    Format { offset: usize, what: String },
    /// The speaker probe needs at least two distinct speakers.
    SingleSpeaker,
    /// Training produced a non-finite loss.
    Diverged { context: &'static str },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { context, expected, got } => {
                write!(f, "shape mismatch in {context}: expected {expected}, got {got}")
            }
            CoreError::SequenceTooShort { needed, got } => {
                write!(f, "sequence too short: need at least {needed} frames, got {got}")
            }
            CoreError::InfeasibleLabel { frames, required } => {
                write!(f, "label infeasible: {frames} frames cannot carry {required} lattice slots")
            }
            CoreError::EnumerationGuard { paths, limit } => {
                write!(f, "refusing to enumerate {paths} paths (limit {limit})")
            }
            CoreError::MissingGrad { name } => write!(f, "parameter '{name}' has no gradient"),
            CoreError::DuplicateName { name } => write!(f, "duplicate parameter name '{name}'"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            CoreError::Format { offset, what } => {
                write!(f, "format error at byte {offset}: {what}")
            }
            CoreError::SingleSpeaker => write!(f, "speaker probe needs at least two speakers"),
            CoreError::Diverged { context } => write!(f, "non-finite loss during {context}"),
        }
    }
}
