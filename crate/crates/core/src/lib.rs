//! Core of a scene-aware multi-person motion capture engine.
//!
//! Recovers absolute position, per-person scale, shape and articulated pose
//! of several people together with a metric scene point cloud from
//! per-frame normalized disparity, 2D joints, body-parameter estimates and
//! segmentation masks. Everything here is `no_std` + `alloc`; file formats
//! and the command-line tool live in the `scenecap` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// NaN must fail these checks, and index loops follow the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod assignment;
pub mod body;
pub mod camera;
pub mod energy;
pub mod grid;
pub mod error;
pub mod math;
pub mod metrics;
pub mod observations;
mod par;
pub mod raster;
pub mod scene;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
