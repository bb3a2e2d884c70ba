//! Crate-wide error type.
//!
//! Library code returns [`Error`]; binaries wrap it in `anyhow` for display.
//! Variants carry enough context (file, layer name, step index, …) that a
//! failure deep inside a pipeline stage still reads sensibly at top level.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// Velocity must not decrease with depth in a layered baseline.
    #[error("velocity inversion with depth: layer {upper} ({upper_v} m/s) above faster layer {lower} ({lower_v} m/s)")]
    VelocityInversion {
        upper: usize,
        lower: usize,
        upper_v: f64,
        lower_v: f64,
    },

    /// Time step violates the CFL stability bound.
    #[error("CFL violation: dt = {dt} s exceeds bound {bound} s (coeff {coeff} · dx {dx} m / v_max {v_max} m/s)")]
    CflViolation {
        dt: f64,
        bound: f64,
        coeff: f64,
        dx: f64,
        v_max: f64,
    },

    /// The wavefield left the finite range mid-simulation.
    #[error("non-finite wavefield at time step {step}{context}")]
    NonFiniteField { step: usize, context: String },

    /// Training loss became non-finite.
    #[error("non-finite loss at epoch {epoch}: training diverged")]
    Divergence { epoch: usize },

    /// A named tensor is absent from a weight file.
    #[error("weight file {path}: missing tensor '{name}'")]
    MissingTensor { path: PathBuf, name: String },

    /// A named tensor exists but has the wrong shape.
    #[error("weight file {path}: tensor '{name}' has shape {found:?}, expected {expected:?}")]
    TensorShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Payload shorter than the index claims.
    #[error("weight file {path}: truncated payload (need {need} bytes, have {have})")]
    TruncatedWeights {
        path: PathBuf,
        need: u64,
        have: u64,
    },

    /// Array or image dimensions incompatible with an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// File-format violation in one of the structured text or raw formats.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A pipeline stage failed; carries the stage name for the run manifest.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
