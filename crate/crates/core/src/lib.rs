//! Framework-free encoder/decoder segmentation networks (U-Net, SD-Net and
//! FC-DenseNet styles) with squeeze-&-excitation recalibration blocks, built
//! on a small dense-tensor core with hand-written forward/backward passes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - the dense `(N, C, H, W)` value type and its whole-tensor ops
//! * [`io`] - `.tns` tensor files, checkpoint record streams, PGM images
//! * [`layers`] - differentiable layers (conv, transposed conv, batch norm, ...)
//! * [`se`] - the cSE / sSE / scSE recalibration blocks
//! * [`arch`] - network assembly for the three families and SE positions
//! * [`loss`] - median-frequency weighting, cross-entropy + soft Dice, metrics
//! * [`optim`] / [`train`] - momentum SGD, the deterministic training loop
//! * [`gradcheck`] - finite-difference auditing of the backward passes
//! * [`data`] - seeded synthetic segmentation corpora and manifests

pub mod arch;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod scalar;
pub mod se;
pub mod tensor;
pub mod train;

pub use error::{Result, SefcnError};
pub use scalar::Scalar;
pub use tensor::Tensor;
