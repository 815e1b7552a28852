use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned voxel lattice in the LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let spec = Self {
            origin,
            voxel_size,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid spanning `[lo, hi)` per axis with the given voxel size.
    pub fn from_range(lo: [f64; 3], hi: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut dims = [0; 3];
        for a in 0..3 {
            let n = ((hi[a] - lo[a]) / voxel_size[a]).round();
            if !(n >= 1.0 && n.is_finite()) {
                return Err(Error::Config(format!(
                    "grid axis {a}: range [{}, {}) with voxel {} is empty",
                    lo[a], hi[a], voxel_size[a]
                )));
            }
            dims[a] = n as usize;
        }
        Self::new(lo, voxel_size, dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "grid voxel size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("grid dims must be positive, got {:?}", self.dims)));
        }
        if self.extent().iter().chain(&self.origin).any(|x| !x.is_finite()) {
            return Err(Error::Config("grid extent is not finite".into()));
        }
        Ok(())
    }

    /// Far corner `origin + dims * voxel_size`.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size[a])
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major linear index of an in-range voxel.
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn voxel_center(&self, idx: [i64; 3]) -> Result<Vector3<f64>> {
        if (0..3).any(|a| idx[a] < 0 || idx[a] as usize >= self.dims[a]) {
            return Err(Error::Index {
                op: "voxel_center",
                index: idx.to_vec(),
                dims: self.dims.to_vec(),
            });
        }
        Ok(Vector3::from_fn(|a, _| {
            self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a]
        }))
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// Continuous lattice coordinates with voxel centres at integers.
    pub fn lattice_coords(&self, p: &Vector3<f64>) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.voxel_size[a] - 0.5)
    }

    /// True when `other`'s extent lies inside this grid's extent.
    pub fn covers(&self, other: &GridSpec) -> bool {
        let (a, b) = (self.extent(), other.extent());
        (0..3).all(|i| {
            self.origin[i] <= other.origin[i] + 1e-9 && a[i] >= b[i] - 1e-9
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_examples() {
        let unit = GridSpec::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap();
        assert_eq!(unit.voxel_center([0, 0, 0]).unwrap(), Vector3::new(0.5, 0.5, 0.5));

        let g = GridSpec::new([0.0, -40.0, -3.0], [0.2, 0.2, 0.4], [352, 400, 10]).unwrap();
        let c = g.voxel_center([1, 2, 3]).unwrap();
        assert!((c - Vector3::new(0.3, -39.5, -1.6)).norm() < 1e-12);
        let d = g.voxel_center([2, 2, 3]).unwrap() - c;
        assert!((d - Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-12);
        let d = g.voxel_center([1, 2, 4]).unwrap() - c;
        assert!((d.z - 0.4).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_center_is_index_error() {
        let g = GridSpec::new([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        assert!(matches!(g.voxel_center([2, 0, 0]), Err(Error::Index { .. })));
        assert!(matches!(g.voxel_center([0, -1, 0]), Err(Error::Index { .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new([0.0; 3], [0.1, 0.0, 0.1], [1, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], [0.1; 3], [1, 0, 1]).is_err());
        assert!(GridSpec::new([f64::INFINITY, 0.0, 0.0], [0.1; 3], [1, 1, 1]).is_err());
    }

    #[test]
    fn from_range_matches_kitti_dims() {
        let g = GridSpec::from_range([0.0, -40.0, -3.0], [70.4, 40.0, 1.0], [0.05, 0.05, 0.1]).unwrap();
        assert_eq!(g.dims, [1408, 1600, 40]);
        let i = GridSpec::from_range([0.0, -40.0, -3.0], [70.4, 40.0, 1.0], [0.2, 0.2, 0.4]).unwrap();
        assert_eq!(i.dims, [352, 400, 10]);
        assert!(i.covers(&g) && g.covers(&i));
    }

    #[test]
    fn linear_round_trip() {
        let g = GridSpec::new([0.0; 3], [1.0; 3], [3, 4, 5]).unwrap();
        for i in 0..g.num_voxels() {
            assert_eq!(g.linear(g.unlinear(i)), i);
        }
    }
}
