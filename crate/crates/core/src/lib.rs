//! STA-UNet: a U-shaped segmentation network whose attention blocks
//! operate on super tokens, plus its training loop, segmentation metrics,
//! RBF-CKA block-redundancy analysis and an analytic FLOPs audit.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod sta;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
