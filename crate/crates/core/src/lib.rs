//! Kernelized heterogeneous risk minimization: a two-layer network whose tangent
//! features at initialization drive alternating environment inference and
//! invariant learning.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod heterogeneity;
pub mod invariant;
pub mod linalg;
pub mod mlp;
pub mod ntf_space;
pub mod scalar;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use heterogeneity::{AssignMode, ClusterConfig, ClusterModel, EnvPartition};
pub use invariant::{InvariantConfig, InvariantDirection};
pub use mlp::{Activation, MlpState, TrainConfig};
pub use ntf_space::{KernelMode, KernelState, NtfSpace};
pub use scalar::Scalar;

pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Mlp64 = MlpState<f64>;
pub type Mlp32 = MlpState<f32>;
pub type NtfSpace64 = NtfSpace<f64>;
pub type NtfSpace32 = NtfSpace<f32>;
pub type KernelState64 = KernelState<f64>;
pub type KernelState32 = KernelState<f32>;
pub type ClusterModel64 = ClusterModel<f64>;
pub type ClusterModel32 = ClusterModel<f32>;
pub type InvariantDirection64 = InvariantDirection<f64>;
pub type InvariantDirection32 = InvariantDirection<f32>;
