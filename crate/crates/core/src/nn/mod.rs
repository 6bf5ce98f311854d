//! Minimal CPU neural-network engine: NCHW tensors, a recording autodiff
//! tape, the layers the denoiser and feature extractors need, and Adam-family
//! optimisers. Generic over `f32` (training) and `f64` (gradient checks).

mod graph;
mod layers;
pub(crate) mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use ops::{cosine, cosine_map};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use scalar::{matmul, MatRef, Scalar};
pub use tensor::Tensor;
