//! Depth-aware endoscopic video inpainting.
//!
//! Everything in this crate is pure computation over `alloc` containers, so it
//! builds with `#![no_std]` when the default `std` feature is disabled. File
//! formats, configuration files and the command line live in the `daevi`
//! crate.
//!
//! The pipeline, in the order a clip flows through it:
//!
//! 1. [`codec`] embeds masked frames into a latent at a quarter of the input
//!    resolution.
//! 2. [`stgde`] runs a stack of spatial-temporal transformer blocks with
//!    mask-aware patch attention and aggregates every block's attention output
//!    into a depth map.
//! 3. [`bmpcf`] re-embeds the depth map, interleaves visual and depth channels
//!    pairwise and fuses each pair with a grouped convolution.
//! 4. [`codec`] decodes the fused latent back into frames.
//!
//! [`ded`] scores RGB-D clips during adversarial training, [`losses`] holds the
//! full objective and [`training`] / [`inference`] drive everything.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod bmpcf;
pub mod codec;
pub mod config;
pub mod data;
pub mod ded;
mod error;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod stgde;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Array, Real, Tape, Var};
