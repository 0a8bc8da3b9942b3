//! Joint demosaicking and denoising with a normal-inverse-gamma model of
//! ground-truth uncertainty.
//!
//! The crate covers the full pipeline: Bayer mosaicking and bilinear
//! demosaicking, noise synthesis, the NIG prior built from training pairs,
//! a small convolutional network predicting an NIG posterior per pixel,
//! training with the closed-form ELBO, and out-of-distribution fine-tuning
//! with a masked neighbor-pixel prior.

pub mod bayer;
pub mod degrade;
pub mod error;
pub mod filter;
pub mod finetune;
pub mod image;
pub mod io;
pub mod metrics;
pub mod net;
pub mod nig;
pub mod optim;
pub mod prior;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Phase, Plane, RawMosaic};
