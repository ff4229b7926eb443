//! Kernels for fusing LiDAR bird's-eye-view grids with camera features.
//!
//! The crate is organised bottom-up: a dense [`Tensor`] with broadcasting
//! and deterministic reductions, a reverse-mode [`autograd`] tape, and on top
//! of those the pillar encoder, positional encoding, scan orders, the
//! distance-aware state-space layer, the spatial block and the fusion
//! network.

pub mod autograd;
pub mod baseline;
pub mod bev;
pub mod block;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod pillar;
pub mod reduce;
pub mod scan_order;
pub mod spatial;
pub mod ssm;
pub mod tensor;

pub use autograd::{GradTape, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
