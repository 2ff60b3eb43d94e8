//! MFPNet: a lightweight encoder-decoder segmentation network with
//! multi-scale graph-convolutional feature propagation, implemented as a
//! self-contained f64 numerical engine.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: dense (N,C,H,W) tensors and convolution geometry
//! - [`ops`]: forward kernels with hand-derived backward passes
//! - [`tape`]: reverse-mode autodiff over those kernels
//! - [`gradcheck`]: central finite-difference verification
//! - [`blocks`]: bottleneck residual modules, SE attention, segmentation heads
//! - [`sgcn`]: graph projection, adjacency building/normalization, propagation
//! - [`network`]: the assembled model, weight checkpoints, configs
//! - [`accounting`]: exact per-layer parameter and FLOP tables
//! - [`data`] / [`metrics`]: synthetic segmentation data, netpbm I/O, mIoU
//! - [`train`] / [`optim`] / [`loss`]: poly-LR training loop and evaluation

pub mod accounting;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod meter;
pub mod metrics;
pub mod ops;
pub mod network;
pub mod optim;
pub mod params;
pub mod sgcn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Mode, ParamId, ParamStore, StateStore};
pub use tensor::{ConvSpec, Shape, Tensor};
