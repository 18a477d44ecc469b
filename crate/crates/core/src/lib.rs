//! cmlab: a desk-scale laboratory for cross-modal 2D/3D domain adaptation.
//!
//! The crate trains a dense 2D convolutional branch and a sparse per-point 3D
//! branch on synthetic paired scenes, couples them with sparse-to-dense
//! mutual-mimicry losses built on deformable patch pooling, and optionally
//! aligns source and target domains with cross-modal adversarial training.
//! Everything is f64 and bit-reproducible per seed on a given machine.

pub mod cli;
pub mod data;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod pooling;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

mod error;

pub use error::{Error, Result};

// The kernels allocate multi-megabyte scratch ahead of each pass (patch
// matrices, transposes, gradient buffers); the system allocator hands those
// straight back to the OS, so every training iteration would pay the mapping
// cost again. mimalloc keeps them cached per thread.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
