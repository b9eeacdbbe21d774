//! Minimal tensor engine with reverse-mode differentiation.

mod conv;
mod graph;
mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::{col2im, im2col, ConvGeom};
pub(crate) use graph::sigmoid;
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    top_singular_value, Activation, BatchNorm2d, BufferUpdates, Conv2d, ConvTranspose2d, Ctx,
    GatedConv2d, GatedOut, Init, Linear, BN_EPS, IN_EPS,
};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
