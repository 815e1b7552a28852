//! File-level implementations of the `voxelfuse` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::dense::DenseGrid;
use crate::error::{Error, Result};
use crate::geom::{Calibration, GridSpec};
use crate::gradsuite::{run_grad_suite, GradRecord, GRAD_EPS, GRAD_TOL};
use crate::ivlm::{build_frustum, depth_bins_from_points, lift, ImageFeatureMap};
use crate::numgrad::{vxf, Tensor, Value};
use crate::qfm::{concat_restore, fuse, pool_and_flatten, select_nonempty, QfmParams};

use super::config::RunConfig;
use super::kitti::parse_kitti_calib;
use super::scene::{gen_scene, voxelize_points, SceneSummary};
use super::train::{load_params, save_params, scene_seed, train_demo_with, write_loss_csv, TrainReport};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes `calib` in KITTI form: `P2` holds the whole projection and the
/// other two matrices are identities.
pub fn write_kitti_calib(calib: &Calibration, path: &Path) -> Result<()> {
    let p = calib.projection();
    let row = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
    let p2: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| p[(r, c)])).collect();
    let text = format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row(p2),
        row(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        row(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_points_csv(points: &[Vector3<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| Error::Container(format!("{}: {e}", path.display()));
    w.write_record(["x", "y", "z"]).map_err(err)?;
    for p in points {
        w.write_record([p.x, p.y, p.z].map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `x,y,z` rows; an `x,y,z` header line is optional.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            path: shown.clone(),
            line,
            field: "record".into(),
            msg: e.to_string(),
        })?;
        if line == 1 && rec.iter().eq(["x", "y", "z"]) {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::Parse {
                path: shown.clone(),
                line,
                field: "record".into(),
                msg: format!("expected 3 columns, found {}", rec.len()),
            });
        }
        let mut xyz = [0.0; 3];
        for (k, name) in ["x", "y", "z"].iter().enumerate() {
            xyz[k] = rec[k].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: shown.clone(),
                line,
                field: name.to_string(),
                msg: format!("`{}` is not a finite number", &rec[k]),
            })?;
        }
        out.push(Vector3::from(xyz));
    }
    Ok(out)
}

/// `gen-scene`: writes `scene.json`, `points.csv`, `features.vxf`,
/// `lidar_voxels.vxf` and `calib.txt` for the scene of `seed`.
pub fn gen_scene_cmd(cfg: &RunConfig, seed: u64, out: &Path) -> Result<SceneSummary> {
    ensure_dir(out)?;
    let scene = gen_scene(cfg, seed)?;
    let summary = scene.summary();
    write_json(&out.join("scene.json"), &summary)?;
    write_points_csv(&scene.points, &out.join("points.csv"))?;
    vxf::write(out.join("features.vxf"), scene.image_features.data.data())?;
    let lidar = voxelize_points(&scene.points, &cfg.lidar_grid, cfg.channels, cfg.count_norm)?;
    vxf::write(out.join("lidar_voxels.vxf"), lidar.data.data())?;
    write_kitti_calib(&scene.calib, &out.join("calib.txt"))?;
    Ok(summary)
}

/// `lift`: lifts `[W_F, H_F, C]` features into `grid_cfg.image_grid` using
/// depth bins from the point cloud; writes `<out>/image_voxels.vxf`.
pub fn lift_cmd(grid_cfg: &RunConfig, calib: &Path, features: &Path, points: &Path, out: &Path) -> Result<PathBuf> {
    let calib = parse_kitti_calib(calib)?;
    let t = vxf::read(features)?;
    let fm = ImageFeatureMap::new(Value::constant(t), grid_cfg.camera.stride as f64)?;
    let (w, h, _) = fm.dims();
    let pts = read_points_csv(points)?;
    let depth = depth_bins_from_points(&pts, &calib, (w, h), fm.stride, &grid_cfg.depth)?;
    let grid = lift(&build_frustum(&fm, &depth)?, &calib, &grid_cfg.image_grid)?;
    ensure_dir(out)?;
    let path = out.join("image_voxels.vxf");
    vxf::write(&path, grid.data.data())?;
    Ok(path)
}

fn dense_from_file(path: &Path) -> Result<DenseGrid> {
    let t = vxf::read(path)?;
    let &[x, y, z, _] = t.shape() else {
        return Err(Error::shape(
            "fuse",
            format!("{} holds {:?}, expected [X, Y, Z, C]", path.display(), t.shape()),
        ));
    };
    DenseGrid::from_tensor(GridSpec::new([0.0; 3], [1.0; 3], [x, y, z])?, t)
}

/// `fuse`: LiDAR voxels attend over pooled image voxels with parameters
/// from a bundle directory; writes the fused `[X, Y, Z, 2C]` grid.
pub fn fuse_cmd(lambda: usize, lidar: &Path, image: &Path, params: &Path, out: &Path) -> Result<Tensor> {
    let lidar = dense_from_file(lidar)?;
    let image = dense_from_file(image)?;
    let store = load_params(params)?;
    let qfm = QfmParams::from_store(&store)?;
    let bound = store.bind_frozen();
    let sparse = select_nonempty(&lidar)?;
    let keys = pool_and_flatten(&image, lambda)?;
    let fused = concat_restore(&fuse(&sparse.features, &keys, &qfm, &bound)?, &sparse)?;
    let t = fused.data.data().clone();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    vxf::write(out, &t)?;
    Ok(t)
}

/// `train-demo`: writes `losses.csv`, `scene.json` for the first training
/// scene, and the trained parameters under `params/`.
pub fn train_demo_cmd(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&super::LossRow)) -> Result<TrainReport> {
    ensure_dir(out)?;
    let report = train_demo_with(cfg, &mut progress)?;
    write_loss_csv(&report.rows, create(&out.join("losses.csv"))?)?;
    write_json(&out.join("scene.json"), &gen_scene(cfg, scene_seed(cfg.seed, 0))?.summary())?;
    save_params(&report.model.store, &out.join("params"))?;
    Ok(report)
}

/// `check-grads`: runs the gradient suite and fails with a numeric error
/// if any check exceeds the tolerance.
pub fn check_grads_cmd(seeds: &[u64]) -> Result<Vec<GradRecord>> {
    let recs = run_grad_suite(seeds, GRAD_EPS)?;
    if let Some(bad) = recs.iter().find(|r| !(r.error < GRAD_TOL)) {
        return Err(Error::numeric(
            "check_grads",
            format!("{} seed {}: relative error {:e}", bad.check, bad.seed, bad.error),
        ));
    }
    Ok(recs)
}
