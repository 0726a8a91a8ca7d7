// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- numerics --
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("vector norm below 1e-12")]
    ZeroNorm,
    #[error("SVD did not converge within {sweeps} sweeps")]
    SvdFailure { sweeps: usize },
    #[error("backprop seed node {0} is not scalar-valued")]
    NonScalarSeed(usize),

    // -- model --
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("corpus spec is empty: {0}")]
    EmptySpec(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("site {0} is not valid for this model")]
    BadSite(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    BadToken { token: u32, vocab: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("probe vector has zero norm")]
    ZeroProbe,

    // -- SAE --
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("feature {0} is dead (decoder column norm below 1e-12)")]
    DeadFeature(usize),
    #[error("feature {0} never fires on the corpus")]
    NeverFires(usize),

    // -- interference --
    #[error("need at least two live features, found {0}")]
    TooFewFeatures(usize),
    #[error("feature {0} has no ingested gloss vector")]
    MissingGloss(usize),

    // -- interventions --
    #[error("no linear path from {from} to {to} under frozen linearization")]
    NoLinearPath { from: String, to: String },
    #[error("token gradient has zero norm")]
    ZeroGradient,
    #[error("every scale in the grid violates the coherence guard")]
    AllGuarded,
    #[error("injection snippet overlaps the target token set (token {0})")]
    OverlapGuard(u32),
    #[error("neuron {neuron} out of range for width {width}")]
    BadNeuron { neuron: usize, width: usize },

    // -- evaluation --
    #[error("target token set is empty")]
    EmptyTokenSet,
    #[error("token {0} has no embedding row")]
    MissingEmbedding(u32),
    #[error("baseline weighted cosine is not positive")]
    ZeroBaseline,

    // -- harness --
    #[error("stage {stage} failed: {cause}")]
    StageFailure { stage: String, cause: String },
    #[error("run directory {0} holds another run; pass --force to replace it")]
    RunDirConflict(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn stage(stage: &str, cause: impl std::fmt::Display) -> Self {
        Error::StageFailure {
            stage: stage.to_owned(),
            cause: cause.to_string(),
        }
    }
}
