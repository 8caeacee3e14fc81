//! Spatial-contextual discrepancy information compensation for GAN inversion,
//! at desk scale.
//!
//! The crate bundles a miniature frozen style-based generator and inversion
//! encoder ([`toygen`]), a discrepancy information prediction network
//! ([`dipn`]), a discrepancy information compensation network and the
//! invert/edit pipelines ([`dicn`]), latent-direction discovery ([`editing`]),
//! the joint training loss ([`losses`]), the two-stage trainer and gradient
//! checker ([`trainer`]), reconstruction metrics and experiment harnesses
//! ([`evalsuite`]), and the file formats behind the `sdic` binary ([`ntf`],
//! [`imageio`], [`config`], [`checkpoint`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dicn;
pub mod dipn;
pub mod editing;
pub mod evalsuite;
pub mod imageio;
pub mod losses;
pub mod nn;
pub mod ntf;
pub mod toygen;
pub mod trainer;

pub use config::RunConfig;
pub use imageio::Image;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &str, expected: impl std::fmt::Debug, got: &[usize]) -> Error {
    Error::Shape {
        context: context.to_string(),
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
