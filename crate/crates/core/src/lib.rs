//! Homogeneous camera–LiDAR voxel fusion: image features are lifted into
//! the LiDAR voxel lattice, fused by attention, and tied together at the
//! object level by a stop-gradient consistency loss. Everything runs on a
//! small reverse-mode autodiff core so that each stage can be gradient
//! checked.

pub mod dense;
pub mod detector;
pub mod error;
pub mod geom;
pub mod gradsuite;
pub mod ivlm;
pub mod losses;
pub mod numgrad;
pub mod pipeline;
pub mod qfm;
pub mod vfim;

pub use error::{Error, Result};
