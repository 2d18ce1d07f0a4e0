//! Function encoders: neural basis functions fitted per task by ridge
//! regression, with the induced kernel, compact-basis training, bound
//! calculators and the benchmark task families.

pub mod bounds;
pub mod datasets;
pub mod deep_kernel;
pub mod encoder;
pub mod linalg;
pub mod nnbasis;
pub mod node_basis;
pub mod training;

pub use encoder::{CoefficientVector, EncoderError, FunctionEncoder, TaskDataset};
pub use linalg::Matrix;
pub use nnbasis::{Activation, Architecture, BasisSet, FeatureMap, MlpSpec};

/// Splitmix64 finalizer applied to `seed + index * golden`; used wherever a
/// per-item stream is derived from one run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
