//! A small reverse-mode autodiff engine specialised for 3-D convolutional
//! segmentation networks on the CPU, with a 3-D U-Net and PLS-Net on top.
//!
//! Tensors are `f32`, laid out `[batch, channel, z, y, x]`. Mixed precision is
//! emulated exactly by rounding to IEEE binary16 at every operation boundary.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod models;
pub mod optim;
pub mod params;
pub mod precision;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::conv::ConvGeom;
pub use kernels::resample::Interp;
pub use models::{
    build_plsnet, build_unet, count_parameters, Architecture, ModelConfig, ModelHandle, PlsNetConfig, UNetConfig,
};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use precision::{Device, LossScaler, Precision};
pub use tensor::Tensor;
