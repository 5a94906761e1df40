use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the processing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("point ({x}, {y}, {z}) lies outside the grid bounding box")]
    OutOfDomain { x: f64, y: f64, z: f64 },

    #[error("operator assembly failed: {0}")]
    Assembly(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("eigensolver did not converge: worst relative residual {worst_residual:.3e} after {iterations} steps")]
    EigenConvergence {
        iterations: usize,
        worst_residual: f64,
    },

    #[error("histogram is degenerate: image holds a single intensity value")]
    DegenerateHistogram,

    #[error("mask is empty")]
    EmptyMask,

    #[error("level set has no sign change; no surface to extract")]
    NoSignChange,

    #[error("spectrum is degenerate: {0}")]
    DegenerateSpectrum(String),

    #[error("GCV denominator is non-positive at s = {s:e}")]
    DegenerateSmoothing { s: f64 },

    #[error("phantom radius {radius:e} m is below four grid spacings ({min_radius:e} m)")]
    Resolution { radius: f64, min_radius: f64 },

    #[error("correlation undefined for component {component}: zero variance")]
    UndefinedCorrelation { component: usize },

    #[error("malformed volume header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("unsupported scalar type tag `{0}`")]
    UnsupportedScalar(String),

    #[error("missing input file {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit status: 3 for numerical failures, 2 for bad data.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Convergence { .. }
            | Error::EigenConvergence { .. }
            | Error::DegenerateSpectrum(_)
            | Error::DegenerateSmoothing { .. } => 3,
            _ => 2,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
