//! Synthetic scenes: car-sized boxes on a ground plane, noisy surface
//! points, and an image feature map stamped with one signature per box.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dense::DenseGrid;
use crate::detector::CAR_SIZE;
use crate::error::{Error, Result};
use crate::geom::{bev_intersection, Box3D, Calibration, GridSpec};
use crate::ivlm::ImageFeatureMap;
use crate::numgrad::{Tensor, Value};

use super::config::RunConfig;

const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub points: Vec<Vector3<f64>>,
    pub image_features: ImageFeatureMap,
    pub gt_boxes: Vec<Box3D>,
    pub calib: Calibration,
    pub seed: u64,
}

/// What `scene.json` records.
#[derive(Debug, Clone, Serialize)]
pub struct SceneSummary {
    pub seed: u64,
    pub boxes: Vec<Box3D>,
    /// Row-major 3x4 LiDAR-to-pixel projection.
    pub calib: [[f64; 4]; 3],
    pub num_points: usize,
}

impl SyntheticScene {
    pub fn summary(&self) -> SceneSummary {
        let p = self.calib.projection();
        SceneSummary {
            seed: self.seed,
            boxes: self.gt_boxes.clone(),
            calib: std::array::from_fn(|r| std::array::from_fn(|c| p[(r, c)])),
            num_points: self.points.len(),
        }
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated nonnegative")
}

/// Points spread over the six faces of `b` at `density` per square metre,
/// jittered by `sigma` on every axis.
fn surface_points(b: &Box3D, density: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let noise = gaussian(sigma);
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    let mut out = Vec::new();
    for axis in 0..3 {
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let count = (density * b.size[a1] * b.size[a2]).round().max(1.0) as usize;
        for side in [-1.0, 1.0] {
            for _ in 0..count {
                let mut local = [0.0; 3];
                local[axis] = side * half[axis];
                local[a1] = rng.random_range(-half[a1]..=half[a1]);
                local[a2] = rng.random_range(-half[a2]..=half[a2]);
                let jitter = Vector3::from_fn(|_, _| noise.sample(rng));
                out.push(b.to_world(&Vector3::from(local)) + jitter);
            }
        }
    }
    out
}

fn inside_grid(b: &Box3D, grid: &GridSpec) -> bool {
    let (lo, hi) = b.enclosing_aabb();
    let ext = grid.extent();
    (0..3).all(|a| lo[a] >= grid.origin[a] && hi[a] <= ext[a])
}

fn in_view(calib: &Calibration, b: &Box3D, width: f64, height: f64) -> bool {
    calib
        .project(&b.center_vec())
        .is_some_and(|p| (0.0..width).contains(&p.u) && (0.0..height).contains(&p.v))
}

/// Generates the scene for `seed`. Boxes are re-drawn until each one is
/// inside the LiDAR grid, centred in the camera view, disjoint from the
/// others in bird's-eye view, and contains at least one of its points.
pub fn gen_scene(cfg: &RunConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = cfg.camera.calibration()?;
    let sc = &cfg.scene;
    let (w_px, h_px) = (cfg.camera.width as f64, cfg.camera.height as f64);
    let half_fov = (0.5 * w_px / cfg.camera.fx).atan();

    let count = rng.random_range(sc.min_boxes..=sc.max_boxes);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut points = Vec::new();
    for k in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let x = rng.random_range(sc.x_range[0]..sc.x_range[1]);
            let reach = 0.8 * x * half_fov.tan();
            let y = rng.random_range(-reach..=reach);
            let size = CAR_SIZE.map(|s| s * rng.random_range(0.9..1.1));
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let b = Box3D::new([x, y, sc.ground_z + 0.5 * size[2]], size, yaw)?;
            if !inside_grid(&b, &cfg.lidar_grid)
                || !in_view(&calib, &b, w_px, h_px)
                || boxes.iter().any(|o| bev_intersection(o, &b) > 0.0)
            {
                continue;
            }
            let pts = surface_points(&b, sc.point_density, sc.noise_sigma, &mut rng);
            if !pts.iter().any(|p| b.contains(p)) {
                continue;
            }
            boxes.push(b);
            points.extend(pts);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "gen_scene: could not place box {k} after {MAX_ATTEMPTS} attempts"
            )));
        }
    }

    let noise = gaussian(sc.noise_sigma);
    for _ in 0..sc.ground_points {
        let x = rng.random_range(sc.x_range[0]..sc.x_range[1]);
        let reach = x * half_fov.tan();
        let y = rng.random_range(-reach..=reach);
        points.push(Vector3::new(x, y, sc.ground_z + noise.sample(&mut rng)));
    }

    let image_features = render_features(cfg, &calib, &boxes, &mut rng)?;
    Ok(SyntheticScene {
        points,
        image_features,
        gt_boxes: boxes,
        calib,
        seed,
    })
}

/// Background noise, then each box's signature painted over the feature
/// cells covered by its projected corners, farthest box first.
fn render_features(cfg: &RunConfig, calib: &Calibration, boxes: &[Box3D], rng: &mut ChaCha8Rng) -> Result<ImageFeatureMap> {
    let (w, h) = cfg.camera.feature_dims();
    let c = cfg.channels;
    let stride = cfg.camera.stride as f64;
    let bg = gaussian(cfg.scene.background);
    let mut data: Vec<f64> = (0..w * h * c).map(|_| bg.sample(rng)).collect();
    let unit = gaussian(1.0);
    let signatures: Vec<Vec<f64>> = boxes
        .iter()
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| unit.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    let depth = |b: &Box3D| calib.project(&b.center_vec()).map_or(f64::INFINITY, |p| p.depth);
    order.sort_by(|&a, &b| depth(&boxes[b]).total_cmp(&depth(&boxes[a])).then(a.cmp(&b)));
    for k in order {
        let proj: Vec<_> = boxes[k].corners().iter().filter_map(|p| calib.project(p)).collect();
        if proj.is_empty() {
            continue;
        }
        let cell = |x: f64, n: usize| ((x / stride).floor().max(0.0) as usize).min(n - 1);
        let (umin, umax) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.u), b.max(p.u)));
        let (vmin, vmax) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.v), b.max(p.v)));
        if umax < 0.0 || vmax < 0.0 || umin >= w as f64 * stride || vmin >= h as f64 * stride {
            continue;
        }
        for m in cell(umin, w)..=cell(umax, w) {
            for n in cell(vmin, h)..=cell(vmax, h) {
                let at = (m * h + n) * c;
                data[at..at + c].copy_from_slice(&signatures[k]);
            }
        }
    }
    ImageFeatureMap::new(Value::constant(Tensor::new(vec![w, h, c], data)?), stride)
}

/// Per-voxel statistics: mean offset of the voxel's points from its centre
/// (3 channels), an intensity placeholder of 1, point count over
/// `count_norm`, then zeros up to `channels`. Points outside the grid are
/// dropped.
pub fn voxelize_points(points: &[Vector3<f64>], grid: &GridSpec, channels: usize, count_norm: f64) -> Result<DenseGrid> {
    if channels < 5 {
        return Err(Error::Config(format!("voxelize: need at least 5 channels, got {channels}")));
    }
    let mut sums = vec![[0.0f64; 3]; grid.num_voxels()];
    let mut counts = vec![0usize; grid.num_voxels()];
    for p in points {
        let Some(idx) = grid.voxel_of(p) else { continue };
        let i = grid.linear(idx);
        let c = grid.voxel_center(idx.map(|x| x as i64))?;
        for a in 0..3 {
            sums[i][a] += p[a] - c[a];
        }
        counts[i] += 1;
    }
    let [x, y, z] = grid.dims;
    let mut data = Tensor::zeros(&[x, y, z, channels]);
    let out = data.data_mut();
    for (i, (&n, s)) in counts.iter().zip(&sums).enumerate() {
        if n == 0 {
            continue;
        }
        let row = &mut out[i * channels..(i + 1) * channels];
        for a in 0..3 {
            row[a] = s[a] / n as f64;
        }
        row[3] = 1.0;
        row[4] = n as f64 / count_norm;
    }
    DenseGrid::from_tensor(*grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let cfg = RunConfig::toy();
        let a = gen_scene(&cfg, 11).unwrap();
        let b = gen_scene(&cfg, 11).unwrap();
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert_eq!(a.points, b.points);
        assert_eq!(a.image_features.data.values(), b.image_features.data.values());
        let c = gen_scene(&cfg, 12).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn every_box_holds_a_point_and_respects_count() {
        let cfg = RunConfig::toy();
        for seed in 0..10 {
            let s = gen_scene(&cfg, seed).unwrap();
            assert!((1..=5).contains(&s.gt_boxes.len()));
            for b in &s.gt_boxes {
                assert!(s.points.iter().any(|p| b.contains(p)), "seed {seed}");
            }
        }
    }

    #[test]
    fn empty_scene_has_background_only() {
        let mut cfg = RunConfig::toy();
        cfg.scene.min_boxes = 0;
        cfg.scene.max_boxes = 0;
        let s = gen_scene(&cfg, 3).unwrap();
        assert!(s.gt_boxes.is_empty());
        assert_eq!(s.points.len(), cfg.scene.ground_points);
        let max = s.image_features.data.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 10.0 * cfg.scene.background);
    }

    #[test]
    fn voxelize_basics() {
        let grid = GridSpec::new([0.0; 3], [1.0; 3], [3, 3, 3]).unwrap();
        let empty = voxelize_points(&[], &grid, 6, 4.0).unwrap();
        assert!(empty.data.values().iter().all(|&v| v == 0.0));
        let centre = grid.voxel_center([1, 2, 0]).unwrap();
        let g = voxelize_points(&[centre], &grid, 6, 4.0).unwrap();
        assert_eq!(g.voxel([1, 2, 0]), &[0.0, 0.0, 0.0, 1.0, 0.25, 0.0]);
        assert_eq!(g.data.values().iter().filter(|&&v| v != 0.0).count(), 2);
        assert!(voxelize_points(&[], &grid, 4, 1.0).is_err());
    }
}
