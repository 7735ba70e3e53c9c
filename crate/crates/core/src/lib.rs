//! Core of a video joint denoising and demosaicking toolkit: raw degradation,
//! synthetic motion, flow-based metrics, a recurrent restoration network with
//! global-to-local alignment, its training losses, and the pieces needed to
//! train it. Everything here is `no_std` with `alloc`.

#![no_std]

extern crate alloc;

pub mod baseline;
pub mod degrade;
pub mod error;
pub mod flowmetrics;
pub mod glam;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod layers;
mod linalg;
pub mod losses;
pub mod motion;
pub mod net;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
