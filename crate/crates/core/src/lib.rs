//! Spiking U-Net segmentation: an ANN trained with reverse-mode autodiff,
//! converted to integrate-and-fire neurons by threshold balancing, then
//! fine-tuned with surrogate-gradient BPTT.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod conversion;
pub mod data;
pub mod error;
pub mod finetune;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod snn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = segnet::Network<f32>;
pub type Network64 = segnet::Network<f64>;
pub type UNet32 = segnet::UNetModel<f32>;
pub type UNet64 = segnet::UNetModel<f64>;
pub type Snn32 = snn::SnnModel<f32>;
pub type Snn64 = snn::SnnModel<f64>;
pub type SliceSet32 = data::SliceSet<f32>;
pub type SliceSet64 = data::SliceSet<f64>;
