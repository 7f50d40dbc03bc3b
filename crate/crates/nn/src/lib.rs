//! A compact reverse-mode autodiff engine over `f64` NCHW tensors.
//!
//! Only the pieces the matting models need are here: same-padded
//! convolutions, 2× pooling/upsampling, dense layers, group normalization, channel gating,
//! softmax, and the usual elementwise ops. Everything runs on one thread
//! and is bitwise deterministic.

mod conv;
mod graph;
pub mod layers;
mod ops;
pub mod optim;
mod param;
mod tensor;

pub use conv::{sobel_plane, SOBEL_X};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Init, Linear};
pub use ops::sigmoid;
pub use optim::{Adam, AdamConfig};
pub use param::{he_normal, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
