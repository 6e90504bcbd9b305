//! Layer-wise automatic differentiation over `f64` and dual numbers.

pub mod layers;
pub mod network;
pub mod scalar;

pub use layers::{Dims, Layer};
pub use network::Network;
pub use scalar::{Dual, Scalar};
