//! CPU inference engine and verification suite for the RS3Mamba dual-branch
//! semantic segmentation network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense channels-last tensors and neural kernels.
//! * [`ssm`]: the selective-scan (S6) recurrence, a chunked associative scan
//!   and an analytic backward pass.
//! * [`ss2d`]: four-direction 2-D selective scan and the VSS block.
//! * [`encoders`]: the VSS auxiliary encoder and the ResNet-18 main encoder.
//! * [`ccm`]: the collaborative completion module fusing the two branches.
//! * [`model`]: full model assembly, decoder, loss, counters and weight I/O.
//! * [`metrics`]: confusion matrix, per-class F1/IoU, mF1 and mIoU.
//! * [`data`]: image/label I/O, palettes and sliding-window inference.
//! * [`bench`] and [`selfcheck`]: scan benchmark and invariant suite used by
//!   the command-line tool.

pub mod bench;
pub mod ccm;
pub mod data;
pub mod encoders;
pub mod error;
pub mod init;
pub mod labels;
pub mod metrics;
pub mod selfcheck;
pub mod model;
pub mod nn;
pub mod ss2d;
pub mod ssm;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use model::{Ablation, ModelConfig, Rs3Mamba};
pub use tensor::{DType, Scalar, Tensor};
