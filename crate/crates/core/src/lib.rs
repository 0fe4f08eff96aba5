//! Coarse-to-fine sparse TSDF reconstruction from posed camera fragments.
//!
//! Each fragment of keyframes is back-projected into a sparse voxel volume,
//! fused with per-view visibility weights, sparsified along pixel rays and
//! folded into a persistent global volume level by level.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fragmenter;
pub mod geometry;
pub mod global_fusion;
pub mod grid;
pub mod local_fusion;
pub mod pipeline;
pub mod sparsifier;
pub mod surface;
pub mod synthscene;

pub use error::{Error, Result};
