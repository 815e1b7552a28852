use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Camera-frame forward coordinate at or below which a point counts as
/// behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Image-plane position of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projective map from the LiDAR frame to pixel coordinates plus depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    projection: Matrix3x4<f64>,
}

impl Calibration {
    pub fn new(projection: Matrix3x4<f64>) -> Result<Self> {
        if projection.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("calibration matrix has non-finite entries".into()));
        }
        Ok(Self { projection })
    }

    /// `P2 * [R0_rect 0; 0 1] * [Tr_velo_to_cam; 0 0 0 1]`.
    pub fn from_kitti(p2: Matrix3x4<f64>, r0_rect: Matrix3<f64>, velo_to_cam: Matrix3x4<f64>) -> Result<Self> {
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0_rect);
        let mut tr = Matrix4::identity();
        tr.fixed_view_mut::<3, 4>(0, 0).copy_from(&velo_to_cam);
        Self::new(p2 * r0 * tr)
    }

    /// Pinhole camera looking along LiDAR +x, with camera x = -LiDAR y and
    /// camera y = -LiDAR z. `offset` is the camera origin in the LiDAR frame.
    pub fn forward_pinhole(fx: f64, fy: f64, cx: f64, cy: f64, offset: Vector3<f64>) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&axes);
        rt.set_column(3, &(-(axes * offset)));
        Self::new(k * rt)
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<ImagePoint> {
        let h = self.projection * Vector4::new(p.x, p.y, p.z, 1.0);
        let depth = h.z;
        if !(depth > MIN_DEPTH) {
            return None;
        }
        Some(ImagePoint {
            u: h.x / depth,
            v: h.y / depth,
            depth,
        })
    }

    /// Inverse of [`Calibration::project`] for a known depth.
    pub fn unproject(&self, pt: ImagePoint) -> Result<Vector3<f64>> {
        let m: Matrix3<f64> = self.projection.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.projection.column(3);
        let rhs = Vector3::new(pt.u * pt.depth, pt.v * pt.depth, pt.depth) - t;
        m.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numeric("unproject", "singular projection matrix"))
    }
}
