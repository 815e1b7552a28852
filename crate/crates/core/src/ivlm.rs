//! Image voxel lifting: image features are spread along their viewing rays
//! into a frustum volume using one-hot depth bins, then every image voxel
//! gathers from that volume by trilinear interpolation.

use std::rc::Rc;

use crate::dense::DenseGrid;
use crate::error::{Error, Result};
use crate::geom::{Calibration, DepthBinSpec, GridSpec, TrilinearTaps, Vector3};
use crate::numgrad::{GatherPlan, Tensor, Value};

/// Default image pixels per feature cell.
pub const DEFAULT_STRIDE: f64 = 4.0;

/// Backbone features `[W_F, H_F, C_F]`; cell `(m, n)` covers pixels
/// `[m*stride, (m+1)*stride) x [n*stride, (n+1)*stride)`.
#[derive(Debug, Clone)]
pub struct ImageFeatureMap {
    pub data: Value,
    pub stride: f64,
}

impl ImageFeatureMap {
    pub fn new(data: Value, stride: f64) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::shape(
                "image_features",
                format!("expected [W_F, H_F, C_F], got {:?}", data.shape()),
            ));
        }
        if !(stride > 0.0) {
            return Err(Error::Config(format!("feature stride must be positive, got {stride}")));
        }
        Ok(Self { data, stride })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// One-hot depth bins per feature pixel, `[W_F, H_F, R]`.
#[derive(Debug, Clone)]
pub struct DepthField {
    pub data: Tensor,
    pub bins: DepthBinSpec,
}

/// Frustum features `[W_F, H_F, R, C_F]`.
#[derive(Debug, Clone)]
pub struct FrustumTensor {
    pub data: Value,
    pub bins: DepthBinSpec,
    pub stride: f64,
}

impl FrustumTensor {
    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Trilinear sample at continuous frustum indices (cell centres at
    /// integers).
    pub fn sample(&self, u: f64, v: f64, r: f64) -> Result<Vec<f64>> {
        let [w, h, bins, c] = self.dims();
        crate::geom::trilinear_sample(self.data.values(), [w, h, bins], c, [u, v, r])
    }
}

/// Rasterises LiDAR points into per-pixel one-hot depth bins. The nearest
/// point landing in a feature cell decides its bin; cells without points,
/// or whose nearest point is outside the bin range, stay zero.
pub fn depth_bins_from_points(
    points: &[Vector3<f64>],
    calib: &Calibration,
    fmap_dims: (usize, usize),
    stride: f64,
    bins: &DepthBinSpec,
) -> Result<DepthField> {
    let (w, h) = fmap_dims;
    let edges = bins.edges()?;
    let mut nearest = vec![f64::INFINITY; w * h];
    for p in points {
        let Some(img) = calib.project(p) else { continue };
        let (m, n) = ((img.u / stride).floor(), (img.v / stride).floor());
        if !(m >= 0.0 && n >= 0.0 && m < w as f64 && n < h as f64) {
            continue;
        }
        let cell = m as usize * h + n as usize;
        nearest[cell] = nearest[cell].min(img.depth);
    }
    let r = bins.bins;
    let mut data = Tensor::zeros(&[w, h, r]);
    for (cell, &d) in nearest.iter().enumerate() {
        if let Some(b) = bins.bin_of(&edges, d) {
            data.data_mut()[cell * r + b] = 1.0;
        }
    }
    Ok(DepthField { data, bins: *bins })
}

/// `G[m][n] = outer(F[m][n], D[m][n])`: each feature vector is copied into
/// its pixel's active depth slot. Differentiable in `F`.
pub fn build_frustum(features: &ImageFeatureMap, depth: &DepthField) -> Result<FrustumTensor> {
    let (w, h, c) = features.dims();
    let &[dw, dh, r] = depth.data.shape() else {
        return Err(Error::shape(
            "build_frustum",
            format!("depth field must be [W_F, H_F, R], got {:?}", depth.data.shape()),
        ));
    };
    if (dw, dh) != (w, h) || r != depth.bins.bins {
        return Err(Error::shape(
            "build_frustum",
            format!(
                "features [{w}, {h}, {c}] vs depth [{dw}, {dh}, {r}] with {} bins",
                depth.bins.bins
            ),
        ));
    }
    let f = features.data.values();
    let d = depth.data.data();
    let mut out = vec![0.0; w * h * r * c];
    for px in 0..w * h {
        let fv = &f[px * c..(px + 1) * c];
        for b in 0..r {
            let s = d[px * r + b];
            if s != 0.0 {
                let dst = &mut out[(px * r + b) * c..(px * r + b + 1) * c];
                dst.iter_mut().zip(fv).for_each(|(o, x)| *o = s * x);
            }
        }
    }
    let dmask = Rc::new(d.to_vec());
    let data = Value::from_op(
        Tensor::new(vec![w, h, r, c], out)?,
        vec![features.data.clone()],
        Box::new(move |g, ps| {
            ps[0].accumulate_with(|acc| {
                for px in 0..w * h {
                    for b in 0..r {
                        let s = dmask[px * r + b];
                        if s != 0.0 {
                            let gr = &g[(px * r + b) * c..(px * r + b + 1) * c];
                            let a = &mut acc[px * c..(px + 1) * c];
                            a.iter_mut().zip(gr).for_each(|(a, x)| *a += s * x);
                        }
                    }
                }
            })
        }),
    );
    Ok(FrustumTensor {
        data,
        bins: depth.bins,
        stride: features.stride,
    })
}

/// Per-voxel sampling positions of an image grid in a frustum volume.
#[derive(Debug, Clone)]
pub struct LiftPlan {
    pub plan: Rc<GatherPlan>,
    /// Sum of all eight trilinear weights, in- or out-of-lattice, for
    /// voxels whose centre projects inside the frustum range; `None` for
    /// voxels out of view.
    pub weight_sums: Vec<Option<f64>>,
}

impl LiftPlan {
    pub fn in_view(&self) -> usize {
        self.weight_sums.iter().filter(|w| w.is_some()).count()
    }
}

/// Continuous frustum coordinates of a LiDAR-frame point, with feature-cell
/// and depth-bin centres at integers. `None` behind the camera or outside
/// the depth range.
pub fn frustum_coords(
    calib: &Calibration,
    p: &Vector3<f64>,
    stride: f64,
    bins: &DepthBinSpec,
    edges: &[f64],
) -> Option<[f64; 3]> {
    let img = calib.project(p)?;
    let r = bins.continuous_index(edges, img.depth)?;
    Some([img.u / stride - 0.5, img.v / stride - 0.5, r - 0.5])
}

/// Builds the gather plan mapping frustum cells to image voxels.
pub fn lift_plan(
    frustum_dims: [usize; 3],
    bins: &DepthBinSpec,
    stride: f64,
    calib: &Calibration,
    grid: &GridSpec,
) -> Result<LiftPlan> {
    if frustum_dims[2] != bins.bins {
        return Err(Error::shape(
            "lift",
            format!("frustum has {} bins, spec has {}", frustum_dims[2], bins.bins),
        ));
    }
    let edges = bins.edges()?;
    let src_rows = frustum_dims.iter().product();
    let mut plan = GatherPlan::new(src_rows);
    let mut weight_sums = Vec::with_capacity(grid.num_voxels());
    for i in 0..grid.num_voxels() {
        let idx = grid.unlinear(i).map(|x| x as i64);
        let center = grid.voxel_center(idx)?;
        let taps = match frustum_coords(calib, &center, stride, bins, &edges) {
            Some(pos) => TrilinearTaps::new(frustum_dims, pos)?,
            None => None,
        };
        match taps {
            Some(t) => {
                weight_sums.push(Some(t.weight_sum()));
                plan.push_row(t.in_lattice(frustum_dims));
            }
            None => {
                weight_sums.push(None);
                plan.push_row([]);
            }
        }
    }
    Ok(LiftPlan {
        plan: Rc::new(plan),
        weight_sums,
    })
}

/// Resamples frustum features into the image voxel grid. Voxels behind the
/// camera, outside the image, or outside the depth range are zero.
pub fn lift(frustum: &FrustumTensor, calib: &Calibration, grid: &GridSpec) -> Result<DenseGrid> {
    let [w, h, r, _] = frustum.dims();
    let plan = lift_plan([w, h, r], &frustum.bins, frustum.stride, calib, grid)?;
    lift_with_plan(frustum, &plan, grid)
}

/// [`lift`] with a precomputed plan.
pub fn lift_with_plan(frustum: &FrustumTensor, plan: &LiftPlan, grid: &GridSpec) -> Result<DenseGrid> {
    let [.., c] = frustum.dims();
    let [x, y, z] = grid.dims;
    let flat = frustum.data.gather(&plan.plan, c)?;
    DenseGrid::new(*grid, flat.reshape(&[x, y, z, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_calib() -> Calibration {
        // Pixel = (x/z, y/z) * 4 with the camera looking along +z.
        Calibration::new(nalgebra::Matrix3x4::new(
            4.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        ))
        .unwrap()
    }

    fn bins4() -> DepthBinSpec {
        DepthBinSpec::new(0.0, 10.0, 4).unwrap()
    }

    #[test]
    fn empty_cloud_gives_zero_bins() {
        let d = depth_bins_from_points(&[], &axis_calib(), (5, 4), 1.0, &bins4()).unwrap();
        assert!(d.data.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_point_lands_in_its_pixel_and_bin() {
        // u = 4 * x / z = 3.5 and v = 2.5 at depth 2.
        let p = Vector3::new(3.5 * 2.0 / 4.0, 2.5 * 2.0 / 4.0, 2.0);
        let d = depth_bins_from_points(&[p], &axis_calib(), (5, 4), 1.0, &bins4()).unwrap();
        for m in 0..5 {
            for n in 0..4 {
                let row: Vec<f64> = (0..4).map(|b| d.data.at(&[m, n, b])).collect();
                let expect = if (m, n) == (3, 2) { vec![0.0, 1.0, 0.0, 0.0] } else { vec![0.0; 4] };
                assert_eq!(row, expect, "pixel ({m}, {n})");
            }
        }
    }

    #[test]
    fn nearest_point_wins() {
        let at = |z: f64| Vector3::new(3.5 * z / 4.0, 2.5 * z / 4.0, z);
        let d = depth_bins_from_points(&[at(7.0), at(2.0)], &axis_calib(), (5, 4), 1.0, &bins4()).unwrap();
        let row: Vec<f64> = (0..4).map(|b| d.data.at(&[3, 2, b])).collect();
        assert_eq!(row, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn frustum_one_hot_selection() {
        let f = ImageFeatureMap::new(Value::constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()), 1.0).unwrap();
        let bins = DepthBinSpec::new(0.0, 3.0, 3).unwrap();
        let d = DepthField { data: Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(), bins };
        let g = build_frustum(&f, &d).unwrap();
        assert_eq!(g.data.values(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        let zero = DepthField { data: Tensor::zeros(&[1, 1, 3]), bins };
        assert!(build_frustum(&f, &zero).unwrap().data.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frustum_rejects_mismatched_dims() {
        let f = ImageFeatureMap::new(Value::constant(Tensor::zeros(&[2, 2, 3])), 1.0).unwrap();
        let d = DepthField { data: Tensor::zeros(&[2, 3, 4]), bins: bins4() };
        assert!(matches!(build_frustum(&f, &d), Err(Error::Shape { .. })));
        let d = DepthField { data: Tensor::zeros(&[2, 2, 5]), bins: bins4() };
        assert!(build_frustum(&f, &d).is_err());
    }

    #[test]
    fn depth_sum_of_frustum_is_masked_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h, r, c) = (4, 3, 5, 2);
        let f = Tensor::from_fn(&[w, h, c], |_| rng.random_range(-1.0..1.0));
        let mut d = Tensor::zeros(&[w, h, r]);
        for px in 0..w * h {
            if rng.random_bool(0.6) {
                d.data_mut()[px * r + rng.random_range(0..r)] = 1.0;
            }
        }
        let bins = DepthBinSpec::new(0.0, 5.0, r).unwrap();
        let g = build_frustum(
            &ImageFeatureMap::new(Value::constant(f.clone()), 1.0).unwrap(),
            &DepthField { data: d.clone(), bins },
        )
        .unwrap();
        for px in 0..w * h {
            let hit: f64 = (0..r).map(|b| d.data()[px * r + b]).sum();
            for ch in 0..c {
                let s: f64 = (0..r).map(|b| g.data.values()[(px * r + b) * c + ch]).sum();
                assert_eq!(s, hit * f.data()[px * c + ch]);
            }
        }
    }

    fn toy_setup() -> (Calibration, GridSpec, DepthBinSpec) {
        let calib = Calibration::forward_pinhole(8.0, 8.0, 8.0, 8.0, Vector3::zeros()).unwrap();
        let grid = GridSpec::new([1.0, -4.0, -2.0], [1.0, 1.0, 1.0], [8, 8, 4]).unwrap();
        (calib, grid, DepthBinSpec::new(1.0, 9.0, 8).unwrap())
    }

    #[test]
    fn zero_frustum_lifts_to_zero() {
        let (calib, grid, bins) = toy_setup();
        let g = FrustumTensor { data: Value::constant(Tensor::zeros(&[4, 4, 8, 3])), bins, stride: 4.0 };
        let i = lift(&g, &calib, &grid).unwrap();
        assert_eq!(i.data.shape(), &[8, 8, 4, 3]);
        assert!(i.data.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gather_reads_at_most_eight_cells_and_weights_sum_to_one() {
        let (calib, grid, bins) = toy_setup();
        let plan = lift_plan([4, 4, 8], &bins, 4.0, &calib, &grid).unwrap();
        assert!(plan.plan.max_fan_in() <= 8);
        assert!(plan.in_view() > 0);
        for w in plan.weight_sums.iter().flatten() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_is_linear() {
        let (calib, grid, bins) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_g = || Tensor::from_fn(&[4, 4, 8, 2], |_| rng.random_range(-1.0..1.0));
        let (g1, g2) = (rand_g(), rand_g());
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_fn(&[4, 4, 8, 2], |i| a * g1.data()[i] + b * g2.data()[i]);
        let lifted = |t: Tensor| {
            lift(&FrustumTensor { data: Value::constant(t), bins, stride: 4.0 }, &calib, &grid)
                .unwrap()
                .data
                .data()
                .clone()
        };
        let (l1, l2, lm) = (lifted(g1), lifted(g2), lifted(mix));
        for i in 0..lm.len() {
            assert!((lm.data()[i] - a * l1.data()[i] - b * l2.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_reaches_features_through_frustum_and_lift() {
        let (calib, grid, bins) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h, r, c) = (4, 4, 8, 3);
        let mut d = Tensor::zeros(&[w, h, r]);
        for px in 0..w * h {
            d.data_mut()[px * r + rng.random_range(0..r)] = 1.0;
        }
        let depth = DepthField { data: d, bins };
        let f0 = Tensor::from_fn(&[w, h, c], |_| rng.random_range(-1.0..1.0));
        let weights = Value::constant(Tensor::from_fn(&[8, 8, 4, c], |_| rng.random_range(-1.0..1.0)));
        let err = grad_check(
            |f| {
                let fm = ImageFeatureMap::new(f.clone(), 4.0)?;
                let g = build_frustum(&fm, &depth)?;
                Ok(lift(&g, &calib, &grid)?.data.mul(&weights)?.sum())
            },
            &f0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}
