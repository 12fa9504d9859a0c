//! Lesion segmentation: an attention-guided multi-path fusion network on a
//! small reverse-mode autodiff engine, fully connected CRF refinement,
//! morphological cleanup and Jaccard-based evaluation.

pub mod autodiff;
pub mod crf;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod maps;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use kernels::ConvSpec;
pub use maps::{BinaryMask, ProbabilityMap};
pub use network::{Aggregation, BackboneConfig, NetworkParams};
pub use params::ParamStore;
pub use tensor::{Shape, Tensor};
