use thiserror::Error;

use crate::ot::CostKind;

/// Errors produced by measure construction, solvers, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite coordinate in point {index}")]
    InvalidPoint { index: usize },

    #[error("measure has no support points")]
    EmptyMeasure,

    #[error("invalid mass {0}")]
    InvalidMass(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("mass mismatch: source mass {source_mass} vs target mass {target_mass}")]
    MassMismatch { source_mass: f64, target_mass: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid gamma {0}: must be positive and finite")]
    InvalidGamma(f64),

    #[error("unsupported cost kind {0:?}")]
    UnsupportedCost(CostKind),

    #[error("traces do not share the same clean reference measure")]
    MismatchedReference,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("outlier definition check failed: {0}")]
    DefinitionCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
