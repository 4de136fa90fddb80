//! Explicit Transformer approximators for Hölder functions.
//!
//! The network `f_T = f_T3 ∘ f_T2 ∘ f_T1` is built from closed-form weights:
//!
//! * [`quantize`]: positional encoding plus `d·L·M` ReLU ramp layers that snap
//!   every input in a grid cube to its grid point;
//! * [`context`]: one rank-one softmax attention layer giving every
//!   (sequence, column) pair a distinct contextual id;
//! * [`value`]: plateau/step feed-forward gadgets that map each id to its
//!   target column.
//!
//! Construction runs in exact arithmetic ([`ExpSum`]) because the id
//! separations are far below the double range. The remaining modules count
//! operations and parameters, evaluate the VC and statistical bound
//! formulas, and drive the command-line reports.

pub mod assemble;
pub mod bounds;
pub mod complexity;
pub mod context;
pub mod expsum;
pub mod grid;
pub mod quantize;
pub mod report;
pub mod reshape;
pub mod scalar;
pub mod seeds;
pub mod seq;
pub mod value;

pub use expsum::ExpSum;
pub use scalar::{Counted, Scalar, Tally};
pub use seq::{BlockSpec, FeedForward, Head, Precision, PrecisionMode, SeqMatrix};

/// Double-precision sequence matrix.
pub type Matrix = SeqMatrix<f64>;
/// Single-precision sequence matrix.
pub type Matrix32 = SeqMatrix<f32>;
/// Exact sequence matrix.
pub type ExactMatrix = SeqMatrix<ExpSum>;
/// Network with exact weights, as produced by [`assemble::build_approximator`].
pub type ExactNetwork = assemble::TransformerNetwork<ExpSum>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("input outside the domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}; use extended precision")]
    Precision(String),
    #[error("separation direction not found after {0} draws")]
    DirectionNotFound(usize),
    #[error("contextual collision: {0}")]
    Collision(String),
    #[error("insufficient separation budget: {0}")]
    Separation(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
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

impl Error {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }
}
