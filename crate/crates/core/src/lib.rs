//! Toy-scale latent-diffusion inference with two zero-shot customization
//! controls: orthogonalizing the visual embedding against the prompt's
//! textual subspace, and swapping self-attention keys/values from a parallel
//! visual-only denoising pass inside a cross-attention-derived subject mask.
//!
//! Everything is seeded and evaluated in `f64` with fixed summation order,
//! so a run is reproducible bit for bit.

pub mod attention;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod numerics;
pub mod orchestration;
pub mod sampler;

use std::fmt;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};

/// Non-fatal conditions surfaced to the caller and recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// The subject mask derived from this step's cross-attention is empty.
    EmptyMask { step: usize },
    /// A swap step had no earlier cross-attention to build a mask from.
    NoMaskSource { step: usize },
    /// A visual token lost (almost) everything to the textual projection.
    CollapsedVisualToken { index: usize },
    /// One side of a masked similarity had an empty mask.
    EmptyMetricMask { side: &'static str },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::EmptyMask { step } => write!(f, "empty subject mask at step {step}"),
            Warning::NoMaskSource { step } => {
                write!(f, "no earlier cross-attention for the mask at step {step}; swap skipped")
            }
            Warning::CollapsedVisualToken { index } => {
                write!(f, "visual token {index} collapsed under orthogonalization")
            }
            Warning::EmptyMetricMask { side } => write!(f, "empty {side} mask in masked similarity"),
        }
    }
}
