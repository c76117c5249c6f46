//! MSAD-Net: a small CPU deep-learning framework with reverse-mode autodiff,
//! the multiscale dense network with its dilated spatial-attention branch,
//! closed-form parameter auditing, training, data ingestion and Grad-CAM.

pub mod audit;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::conv::{ConvGeometry, Padding};
pub use kernels::norm::Mode;
pub use model::{build_msadnet, ModelConfig, ModelGraph};
pub use tensor::{Element, Precision, Tensor};
