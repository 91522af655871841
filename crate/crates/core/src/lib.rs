//! Saliency-shaped input noise for class-conditional denoising diffusion,
//! built around a tape-based autodiff engine that supports differentiating
//! through its own backward pass.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors, the computation record, gradients
//!   (including gradients of gradients), and a finite-difference oracle.
//! * [`nets`] — the desk-scale classifier and denoiser, losses, parameter
//!   gradients, and optimizers.
//! * [`diffusion`] — noise schedules, forward/reverse diffusion, sampling,
//!   and denoiser training.
//! * [`noise`] — saliency-noise synthesis: gradient inversion, FGSM and
//!   feature-map alternatives, standardization, masks.
//! * [`pipeline`] — the synthetic shapes dataset, end-to-end generation,
//!   localization metrics, studies, checkpoints, and report formats.

pub mod diffusion;
pub mod error;
pub mod mask;
pub mod nets;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{NodeId, Record, Tensor};
