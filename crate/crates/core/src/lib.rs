//! Factorized EEG feature learning.
//!
//! Two convolutional encoders split each trial into class-common features
//! (trained adversarially against resting-state trials) and class-specific
//! features (trained through the classifier), with a difference loss keeping
//! the two latent spaces apart. The crate bundles the autodiff engine, the
//! networks, the losses, the cross-validated training protocol, a synthetic
//! dataset generator and the experiment runners.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Random generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;
