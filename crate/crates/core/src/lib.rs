//! Polynomial fusion layers: a second-order polynomial joint representation
//! of two embeddings whose coefficient tensor is held in a low-rank
//! factorized form (CP, Tucker, or coupled matrix-tensor).
//!
//! Layout: [`tensor`] holds the dense multilinear primitives,
//! [`factorizations`] the parameter containers and dense reconstructions,
//! [`fusion`] the forward passes, [`grad`] the backward passes and Adam,
//! [`harness`] a teacher-student training loop, and [`cli`] the batch
//! command-line front end.

pub mod bundle;
pub mod cli;
pub mod error;
pub mod factorizations;
pub mod fusion;
pub mod grad;
pub mod harness;
pub mod memprobe;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use factorizations::{
    cmf_assemble_dense, cp_reconstruct, pad_one, tucker_reconstruct, BilinearRows, CmfParams,
    CpFactors, TuckerFactors,
};
pub use fusion::{FusionConfig, FusionLayer, LayerParams, Rank, Variant};
pub use tensor::{frobenius_norm, khatri_rao, kronecker, outer_product, DenseTensor, Shape};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
