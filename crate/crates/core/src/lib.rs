//! Neural anisotropy directions (NADs) of network architectures and the
//! experiments that probe them.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod models;
pub mod nad;
pub mod oracles;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use datasets::{LabelSet, LabeledDataset};
pub use experiments::{ExperimentTable, FlipSpec, PoisonSpec, SweepSpec};
pub use models::{Model, ModelSpec, ParamSet, Pooling, Variant};
pub use nad::{Algorithm, NadBasis, NadConfig};
pub use rng::Rng;
pub use spectral::{FourierBasis, Part};
pub use tensor::Tensor;
pub use training::{Loss, TrainConfig, TrainReport};
