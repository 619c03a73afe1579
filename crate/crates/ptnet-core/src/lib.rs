//! Joint change captioning and change detection on bi-temporal image pairs,
//! built on a minimal reverse-mode autodiff engine.
//!
//! The pipeline: a small siamese hierarchical encoder produces four feature
//! levels per phase; a learnable change-type prototype bank modulates
//! bidirectional cross-temporal attention; head-wise task gating splits the
//! fused features into detection- and captioning-oriented representations; an
//! upsampling decoder predicts the change mask while a tiny causal decoder
//! generates the caption, grounded by pooled detection tokens and aligned to
//! a frozen text anchor with a contrastive loss.

pub mod error;
pub mod params;
pub mod tensor;

pub use error::{PtnetError, Result};
pub use tensor::{Element, Gradients, Tape, Tensor};
