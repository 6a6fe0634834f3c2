//! Pixel-level contrastive learning of overcomplete dense descriptors.
//!
//! The crate covers paired-view generation (2D homographies and ray-cast 3D
//! scenes), positive/negative pixel sampling, the bounded contrastive loss,
//! a U-Net backbone and an attention pixel classifier with hand-written
//! gradients, the ColoredMNIST benchmark, training, evaluation and figures.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod coloredmnist;
pub mod config;
pub mod correspondence;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod nn;
pub mod raster;
pub mod sampling;
pub mod scene3d;
pub mod trainer;
pub mod viewgen;
pub mod visualize;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/coloredmnist.md")]
    mod coloredmnist {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
