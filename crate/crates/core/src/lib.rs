//! Large-kernel adapters for parameter-efficient fine-tuning of vision
//! transformers, together with the machinery to train and analyse them on a
//! single CPU core: a reverse-mode autodiff tape, the layers of a small ViT,
//! adapter placements, effective-receptive-field measurement and a training
//! harness with its own dataset and checkpoint formats.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod harness;
pub mod init;
mod kernels;
pub mod nn;
pub mod tensor;

pub use autodiff::{finite_diff_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Tensor, TensorId};
