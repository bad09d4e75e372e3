//! Desk-scale adversarial-robustness workbench: tensor autodiff, small
//! residual CNNs with an optional soft-attention head, l-inf gradient
//! attacks, Grad-CAM and perturbation analysis, and robustness reporting.

pub mod attack;
pub mod attention;
pub mod data;
pub mod error;
pub mod explain;
pub mod hash;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::PrngState;
pub use tensor::{DType, Element, Reduction, Tape, Tensor, ValueId};
