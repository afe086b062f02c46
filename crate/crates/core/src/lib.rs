//! Fine-tuning a pre-trained feature extractor on data with noisy labels.
//!
//! The crate covers the whole experimental loop at desk scale: a Gaussian
//! cluster benchmark and its bundle format ([`dataset`]), label-noise
//! injectors ([`noise`]), robust losses ([`losses`]), a small extractor plus
//! linear head with manual gradients ([`model`]), optimizers ([`optim`]),
//! mixture-model clean-sample selection ([`select`]) and the two-step
//! training procedure with its baselines ([`pipeline`]).

pub mod bench;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod model;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod select;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/two_step.md")]
    mod two_step {}
}
