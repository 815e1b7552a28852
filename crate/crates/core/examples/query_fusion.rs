//! Every occupied LiDAR voxel attends over max-pooled image voxels; the
//! result is concatenated back onto the LiDAR features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelfuse::dense::VoxelFeatures;
use voxelfuse::numgrad::ParamStore;
use voxelfuse::pipeline::train::{lift_scene, scene_lift_plan};
use voxelfuse::pipeline::{gen_scene, voxelize_points, RunConfig};
use voxelfuse::qfm::{concat_sparse, fuse_traced, pool_and_flatten, select_nonempty, QfmParams};

fn main() -> voxelfuse::Result<()> {
    let cfg = RunConfig::toy();
    let scene = gen_scene(&cfg, 2)?;
    let lidar = select_nonempty(&voxelize_points(&scene.points, &cfg.lidar_grid, cfg.channels, cfg.count_norm)?)?;
    let image = lift_scene(&cfg, &scene, &scene_lift_plan(&cfg, &scene.calib)?)?;
    let keys = pool_and_flatten(&image, cfg.qfm.lambda)?;
    println!("{} queries, {} pooled keys", lidar.len(), keys.shape()[0]);

    let mut store = ParamStore::new();
    let params = QfmParams::init(&mut store, cfg.channels, &cfg.qfm, &mut ChaCha8Rng::seed_from_u64(0))?;
    let trace = fuse_traced(&lidar.features, &keys, &params, &store.bind_frozen())?;
    for (i, a) in trace.attention.iter().enumerate() {
        let peak = a.values().iter().cloned().fold(0.0, f64::max);
        println!("head {i}: largest attention weight {peak:.4}");
    }
    let fused = concat_sparse(&trace.output, &lidar)?;
    println!("fused voxels carry {} channels", fused.channels());
    Ok(())
}
