//! Deep graph convolutional networks for point cloud segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`], [`nn`], [`optim`], [`params`]: a small reverse-mode
//!   differentiation core over `f64` arrays, batch-normalized MLP units,
//!   Adam, and the checkpoint format.
//! - [`graph`]: exact, dilated and stochastic dilated k-NN edge construction.
//! - [`layers`]: EdgeConv, MRGCN, GraphSAGE (± normalization) and GIN
//!   operators with residual and dense wrappers.
//! - [`model`]: plain / residual / dense backbones with fusion and
//!   prediction blocks.
//! - [`data`], [`metrics`], [`train`]: synthetic data, file formats, the
//!   training loop and OA / IoU evaluation.
//! - [`config`], [`check`], [`ablation`]: run configuration, built-in
//!   numerical self-checks, and ablation grids.

pub mod ablation;
pub mod autodiff;
pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
