//! Self-contained deep-learning engine and experiment pipeline for
//! multimodal-pretraining experiments on retinal vessel segmentation.
//!
//! The crate provides, from the ground up: a rank-4 tensor type with
//! reverse-mode automatic differentiation, the convolutional layers needed
//! by U-Net / FC-DenseNet / ENet, masked-SSIM and BCE losses, Adam with
//! plateau scheduling and early stopping, a procedural generator of
//! registered retinography/angiography pairs, the two-phase training
//! pipeline (reconstruction pretraining, segmentation fine-tuning) with
//! binary checkpoints, and PR/ROC evaluation with a comparison sweep.

pub mod arch;
pub mod data;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub mod nn;

pub use graph::{Arch, ModelGraph, ParamStore};
pub use tape::{grad_check, ElemOp, Tape, Var};
pub use tensor::{cast, Scalar, Shape, Tensor, TensorError};
