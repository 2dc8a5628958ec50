//! Masked autoencoder (MAE) pre-training for vision transformers, built on a
//! small reverse-mode autodiff tensor library.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a differentiation tape.
//! - [`vit`]: patchify, sine-cosine positional embeddings, transformer blocks,
//!   classifier, parameter store and checkpoint format.
//! - [`mae`]: mask plans, visible-only encoder, mask-token decoder,
//!   reconstruction targets and the masked loss.
//! - [`train`]: optimizers, schedules and the evaluation protocols.
//! - [`data`]: packed dataset format, augmentation and batching.
//! - [`flops`]: analytic compute model.
//! - [`config`]: line-oriented run configuration.
//! - [`viz`]: reconstruction triptychs.

pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod mae;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};

/// Caps the worker pool used for per-sample parallel kernels. Results do not
/// depend on the thread count. Call once, before any training work.
#[cfg(feature = "parallel")]
pub fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(format!("cannot size the thread pool: {e}")))
}
