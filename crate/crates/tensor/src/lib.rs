//! Dense 64-bit tensors with a recording tape for reverse-mode gradients.
//!
//! The engine is deliberately small: a closed set of primitive ops (see
//! [`Op`]), a [`Tape`] that records them, sequential layer stacks built from
//! those ops, and the optimizers needed to train them. Everything runs on a
//! single thread; callers parallelise above this crate.

mod error;
mod gemm;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use nn::{Layer, Mode, Network, Sequential};
pub use ops::{apply, Op};
pub use optim::{Adam, AdamConfig, Optimizer, OptimizerConfig, RmsProp, RmsPropConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Mixes a base seed with a stream index (splitmix64 finaliser).
///
/// Used wherever a single run seed fans out into independent streams, e.g.
/// per-layer dropout masks.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
