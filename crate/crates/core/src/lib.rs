//! Vision state-space UNet for binary medical-image segmentation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`ssm`]: zero-order-hold discretization, recurrent and convolutional
//!   scans, and the input-dependent selective scan.
//! - [`ss2d`], [`vss`]: four-direction cross-scan and the VSS residual block.
//! - [`sdi`]: attention-refined multi-scale fusion by Hadamard product.
//! - [`net`]: the encoder/SDI/decoder model, checkpoints and cost accounting.
//! - [`loss`]: BCE + Dice loss and confusion-based metrics.
//! - [`harness`]: synthetic data, augmentation, AdamW, cosine schedule, training.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod layers;
pub mod loss;
pub mod net;
pub mod sdi;
pub mod ss2d;
pub mod ssm;
pub mod tensor;
pub mod vss;

pub use error::{Error, Result};
pub use net::{ModelConfig, ModelStats, VmUnet};
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
