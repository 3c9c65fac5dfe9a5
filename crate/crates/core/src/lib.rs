//! Bitemporal change detection with a shared-weight siamese U-Net.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`]: dense `f64` tensors and a define-by-run reverse-mode graph.
//! * [`nn`]: named parameters, convolution blocks and spatial self-attention.
//! * [`model`]: the siamese encoder, per-scale differential attention, the dual
//!   decoder and weighted multi-scale distance fusion.
//! * [`loss`]: the batch-balanced contrastive loss and change-class metrics.
//! * [`data`]: synthetic bitemporal scenes, Netpbm I/O, batching and the
//!   classical differencing baseline.
//! * [`train`]: Adam, training/evaluation loops, checkpoints and the ablation
//!   runner used by the CLI.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
