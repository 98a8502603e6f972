//! Dual-modal RGB/thermal feature fusion with cross-attention.
//!
//! The pipeline shrinks both feature maps, enhances each modality with
//! cross-attention whose queries come from the other modality, refines the
//! pair iteratively with shared parameters, and fuses the result with a 1×1
//! convolution. Everything runs on a small reverse-mode tape so gradients
//! can be checked against finite differences, and a symbolic auditor counts
//! the multiplies each stage costs.

pub mod cfe;
pub mod complexity;
pub mod dmff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod icfe;
pub mod io;
pub mod ops;
pub mod params;
pub mod sfs;
pub mod synth;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GradRecord, Graph, MulCounter, MulSite, Var};
pub use params::{ParamKind, Parameters};
pub use tensor::{Dtype, FeatureMap, Scalar, Tensor};
