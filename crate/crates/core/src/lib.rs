//! Toy-scale testbed for transferable adversarial embedding search against
//! concept-erased conditional diffusion models.
//!
//! The crate bundles a small reverse-mode autodiff engine, a 2-D conditional
//! denoiser with a cross-attention conditioning block, four concept-erasure
//! methods, the textual-inversion and adversarial-search attacks, and the
//! evaluation harness that measures how well an attack embedding restores an
//! erased concept on models it never saw.

pub mod checkpoint;
pub mod conditioning;
pub mod diffusion;
pub mod erasure;
pub mod evaluation;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod restoration;
pub mod rng;
pub mod tensor;

use thiserror::Error;

pub use tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("placeholder token S* has no bound embedding")]
    UnboundPlaceholder,
    #[error("world has no concepts or an empty training set")]
    EmptyWorld,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("time step {t} outside [1, {max}]")]
    TimeStep { t: usize, max: usize },
    #[error("singular normal-equation matrix ({0}); add a ridge term")]
    Singular(String),
    #[error("classifier reached {accuracy:.4} held-out accuracy, below the {required} gate")]
    ClassifierGate { accuracy: f64, required: f64 },
    #[error("degenerate projection: {0}")]
    Degenerate(String),
    #[error("erasure spec is tagged `{got}`, expected `{expected}`")]
    WrongMethod { expected: &'static str, got: String },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("checkpoint format mismatch: {0}")]
    Version(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
