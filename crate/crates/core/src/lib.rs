//! Adversarial training augmented with generated data, at desk scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod artifacts;
pub mod attack;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod generation;
mod kernels;
pub mod labeling;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use attack::{AttackConfig, AttackResult, CascadeConfig, CascadeReport, Norm, PerturbationSet};
pub use autodiff::{Gradients, Tape, Var};
pub use container::Container;
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use generation::{GaussianGenerativeModel, PcaModel};
pub use kernels::ConvGeometry;
pub use labeling::PseudoLabeledSet;
pub use model::{Architecture, Classifier, ModelConfig};
pub use params::ParamStore;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainReport};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Classifier32 = Classifier<f32>;
pub type Classifier64 = Classifier<f64>;
pub type Dataset32 = LabeledDataset<f32>;
pub type Dataset64 = LabeledDataset<f64>;
