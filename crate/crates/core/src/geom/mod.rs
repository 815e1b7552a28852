//! Coordinate machinery shared by the fusion stages.

mod boxes;
mod calib;
mod depth;
mod grid;
mod interp;

pub use boxes::{aabb_iou, bev_intersection, iou_3d, normalize_angle, Box3D};
pub use calib::{Calibration, ImagePoint, MIN_DEPTH};
pub use depth::{depth_to_onehot, DepthBinSpec};
pub use grid::GridSpec;
pub use interp::{trilinear_sample, TrilinearTaps};

pub use nalgebra::Vector3;
