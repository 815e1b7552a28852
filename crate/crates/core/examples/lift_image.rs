//! Image features to voxels: per-pixel depth bins from the point cloud,
//! the frustum outer product, then trilinear lifting into the image grid.

use voxelfuse::ivlm::{build_frustum, depth_bins_from_points, lift};
use voxelfuse::pipeline::{gen_scene, RunConfig};

fn main() -> voxelfuse::Result<()> {
    let cfg = RunConfig::toy();
    let scene = gen_scene(&cfg, 1)?;
    let (w, h, c) = scene.image_features.dims();
    let depth = depth_bins_from_points(&scene.points, &scene.calib, (w, h), scene.image_features.stride, &cfg.depth)?;
    let with_depth = depth.data.data().iter().filter(|&&v| v != 0.0).count();
    println!("features {w}x{h}x{c}; {with_depth} of {} cells have a depth bin", w * h);

    let frustum = build_frustum(&scene.image_features, &depth)?;
    println!("frustum {:?}", frustum.dims());

    let grid = lift(&frustum, &scene.calib, &cfg.image_grid)?;
    let live = grid.data.values().chunks(c).filter(|v| v.iter().any(|&x| x != 0.0)).count();
    println!("image grid {:?}: {live} non-zero voxels", cfg.image_grid.dims);
    Ok(())
}
