use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geom::GridSpec;
use crate::numgrad::{GatherPlan, Tensor, Value};

/// Feature grid `[X, Y, Z, C]` over a [`GridSpec`].
#[derive(Debug, Clone)]
pub struct DenseGrid {
    pub spec: GridSpec,
    pub data: Value,
}

impl DenseGrid {
    pub fn new(spec: GridSpec, data: Value) -> Result<Self> {
        let [x, y, z] = spec.dims;
        match data.shape() {
            &[a, b, c, _] if [a, b, c] == [x, y, z] => Ok(Self { spec, data }),
            s => Err(Error::shape(
                "dense_grid",
                format!("data {s:?} does not match grid dims {:?}", spec.dims),
            )),
        }
    }

    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        let [x, y, z] = spec.dims;
        Self {
            spec,
            data: Value::constant(Tensor::zeros(&[x, y, z, channels])),
        }
    }

    /// Constant grid from a tensor.
    pub fn from_tensor(spec: GridSpec, t: Tensor) -> Result<Self> {
        Self::new(spec, Value::constant(t))
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// Feature vector of voxel `idx`.
    pub fn voxel(&self, idx: [usize; 3]) -> &[f64] {
        let c = self.channels();
        let i = self.spec.linear(idx);
        &self.data.values()[i * c..(i + 1) * c]
    }
}

/// Feature grid stored as the rows of its occupied voxels; every other
/// voxel reads zero. Carries the same information as the scattered
/// [`DenseGrid`] without materializing it.
#[derive(Debug, Clone)]
pub struct SparseGrid {
    pub spec: GridSpec,
    /// `[M x C]`
    pub rows: Value,
    /// Row of each voxel by linear index.
    slots: Rc<Vec<Option<u32>>>,
    linear: Vec<usize>,
}

impl SparseGrid {
    /// `linear[k]` is the linear voxel index of row `k`; indices must be
    /// unique and inside the grid.
    pub fn new(spec: GridSpec, rows: Value, linear: Vec<usize>) -> Result<Self> {
        match rows.shape() {
            &[m, _] if m == linear.len() => {}
            s => {
                return Err(Error::shape(
                    "sparse_grid",
                    format!("rows {s:?} for {} voxels", linear.len()),
                ))
            }
        }
        let mut slots = vec![None; spec.num_voxels()];
        for (k, &i) in linear.iter().enumerate() {
            let slot = slots.get_mut(i).ok_or_else(|| Error::Index {
                op: "sparse_grid",
                index: vec![i as i64],
                dims: vec![spec.num_voxels()],
            })?;
            if slot.replace(k as u32).is_some() {
                return Err(Error::Contract(format!("sparse_grid: voxel {i} listed twice")));
            }
        }
        Ok(Self {
            spec,
            rows,
            slots: Rc::new(slots),
            linear,
        })
    }

    /// Scatters the rows into a dense grid.
    pub fn to_dense(&self) -> Result<DenseGrid> {
        let [x, y, z] = self.spec.dims;
        let c = self.channels();
        let dense = self.rows.scatter_rows(&self.linear, self.spec.num_voxels())?;
        DenseGrid::new(self.spec, dense.reshape(&[x, y, z, c])?)
    }
}

/// What the detector heads and RoI pooling read from a feature grid.
pub trait VoxelFeatures {
    fn spec(&self) -> &GridSpec;
    fn channels(&self) -> usize;
    /// Channelwise max over `z` per bird's-eye cell, `[X * Y x C]`; ties go
    /// to the smallest `z`.
    fn bev_max(&self) -> Result<Value>;
    /// [`Value::gather`] with `plan` indexed by linear voxel.
    fn gather_voxels(&self, plan: GatherPlan) -> Result<Value>;
}

impl VoxelFeatures for DenseGrid {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn channels(&self) -> usize {
        DenseGrid::channels(self)
    }

    fn bev_max(&self) -> Result<Value> {
        self.data.max_over_z()
    }

    fn gather_voxels(&self, plan: GatherPlan) -> Result<Value> {
        self.data.gather(&Rc::new(plan), DenseGrid::channels(self))
    }
}

impl VoxelFeatures for SparseGrid {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn channels(&self) -> usize {
        self.rows.shape()[1]
    }

    fn bev_max(&self) -> Result<Value> {
        self.rows.max_over_z_rows(&self.slots, self.spec.dims[2])
    }

    /// Taps on empty voxels are dropped; they would add zero.
    fn gather_voxels(&self, plan: GatherPlan) -> Result<Value> {
        if plan.src_rows() != self.spec.num_voxels() {
            return Err(Error::shape(
                "gather_voxels",
                format!("plan reads {} voxels of {}", plan.src_rows(), self.spec.num_voxels()),
            ));
        }
        let mut rows = GatherPlan::new(self.linear.len());
        for q in 0..plan.len() {
            rows.push_row(plan.taps(q).filter_map(|(v, w)| self.slots[v].map(|r| (r as usize, w))));
        }
        self.rows.gather(&Rc::new(rows), self.channels())
    }
}
