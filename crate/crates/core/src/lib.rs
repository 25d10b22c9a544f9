//! Desk-scale dialogue-generation training and evaluation.
//!
//! The crate bundles a reverse-mode autodiff tensor core, a micro
//! transformer for response generation, corpus ingestion with tagged
//! context serialization, interchangeable sentence-embedding providers,
//! context/semantic scoring, a family of composite training losses, text
//! metrics, and a deterministic trainer.
//!
//! Core math is generic over the scalar type ([`Scalar`], `f32`/`f64`);
//! concrete aliases for the common instantiations live at the crate root.

pub mod corpus;
pub mod embeddings;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scores;
pub mod trainer;
pub mod server;
pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// FNV-1a, used wherever a stable, seed-free hash is needed (feature
/// hashing, vocab fingerprints). Stable across platforms and releases.
pub(crate) fn fnv1a_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
