//! Episodic test-time adaptation (TTA) for audio-conditioned autoregressive
//! sequence models, at desk scale.
//!
//! The crate is split into five layers:
//!
//! - [`autodiff`]: a tape-based reverse-mode differentiation engine over dense
//!   `f64` tensors, with a finite-difference gradient checker.
//! - [`slm`]: a toy spoken-language model (conv-subsampling audio encoder,
//!   projector, prompt embedding, causal decoder) plus the adaptable/frozen
//!   parameter partition, snapshots and the binary checkpoint format.
//! - [`corrupt`]: additive noise at a target SNR and image-source shoebox
//!   reverberation.
//! - [`tta`]: entropy minimization and pseudo-labeling under confidence
//!   masking, K-step gradient descent and per-batch reset.
//! - [`harness`]: synthetic data, pretraining, WER, evaluation and the
//!   experiment grid behind the `slm-tta` CLI.

pub mod autodiff;
pub mod corrupt;
pub mod error;
pub mod harness;
pub mod slm;
pub mod tta;

pub use error::{Error, Result};
