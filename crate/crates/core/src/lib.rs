//! Federated averaging simulator with adaptive federated dropout.
//!
//! The numeric core ([`tensor`], [`model`], [`submodel`], [`compression`]) is
//! generic over [`Scalar`] (`f32` or `f64`); the aliases below name the
//! concrete instantiations. The experiment layer ([`federation`],
//! [`experiment`]) runs in `f64`.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compression;
pub mod config;
pub mod control;
pub mod data;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod netsim;
pub mod scalar;
pub mod submodel;
pub mod tensor;

pub use compression::{Codec, CompressedBlob, CompressionError, DgcConfig, DgcState};
pub use config::{ConfigError, ExperimentConfig, Mode};
pub use control::{ControlError, DropoutController, MultiModelController, SingleModelController};
pub use data::{DataConfig, DataError, FederatedDataset, Partition};
pub use experiment::{run_experiment, ExperimentError, Summary};
pub use federation::{aggregate, select_clients, FederationError, MetricsRow, Simulation};
pub use model::{Architecture, Batch, LayerSpec, ModelError, ModelParams};
pub use netsim::{NetError, NetworkModel};
pub use scalar::Scalar;
pub use submodel::{extract, lift, SubModelError, SubModelSpec};
pub use tensor::{ShapeError, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ParamsF32 = ModelParams<f32>;
pub type ParamsF64 = ModelParams<f64>;
pub type BatchF32 = Batch<f32>;
pub type BatchF64 = Batch<f64>;
