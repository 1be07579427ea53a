//! Error type shared by all core modules.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by layout construction, the toy backbone, the scaling
/// pipeline, and the perturbation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A layout precondition was violated (overlapping spans, bad grid, ...).
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    /// Matrix or map dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A token, column, or layer index is out of range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A configuration value failed validation. The message names the field.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The forward pass produced a non-finite value.
    #[error("non-finite value in layer {layer}: {context}")]
    NonFinite { layer: usize, context: String },

    /// An attention intervention returned a matrix that is no longer
    /// row-stochastic or touched a policy-forbidden entry.
    #[error("intervention violated the stochasticity contract in layer {layer}: {context}")]
    InterventionContract { layer: usize, context: String },

    /// A query row lost all of its mass and cannot be renormalized.
    #[error("attention row {row} has zero visible mass")]
    ZeroMassRow { row: usize },

    /// An aggregation was asked for over an empty token span.
    #[error("empty span: {0}")]
    EmptySpan(String),

    /// A step's trace is missing records required by the pipeline.
    #[error("missing attention records: {0}")]
    MissingRecords(String),

    /// A latent with zero norm has no direction to compare.
    #[error("zero-norm latent: {0}")]
    ZeroNorm(String),

    /// Malformed serialized artifact (trace file, PGM, manifest).
    #[error("malformed {kind}: {context}")]
    Malformed { kind: &'static str, context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
