//! The symmetric stop-gradient loss between pooled LiDAR and image RoI
//! features of a scene's boxes, and a few SGD steps on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelfuse::numgrad::{ParamStore, Sgd};
use voxelfuse::pipeline::train::{lift_scene, scene_lift_plan};
use voxelfuse::pipeline::{gen_scene, voxelize_points, RunConfig};
use voxelfuse::vfim::{vfim_loss_batched, voxel_roi_pool_batch, InteractionHeads};

fn main() -> voxelfuse::Result<()> {
    let cfg = RunConfig::toy();
    let scene = gen_scene(&cfg, 3)?;
    let lidar = voxelize_points(&scene.points, &cfg.lidar_grid, cfg.channels, cfg.count_norm)?;
    let image = lift_scene(&cfg, &scene, &scene_lift_plan(&cfg, &scene.calib)?)?;
    let pool = cfg.train.pool;
    let p = voxel_roi_pool_batch(&lidar, &scene.gt_boxes, pool)?;
    let i = voxel_roi_pool_batch(&image, &scene.gt_boxes, pool)?;
    println!("{} boxes, RoI features of width {}", scene.gt_boxes.len(), p.shape()[1]);

    let mut store = ParamStore::new();
    let heads = InteractionHeads::init(&mut store, p.shape()[1], 256, &mut ChaCha8Rng::seed_from_u64(0));
    let sgd = Sgd { lr: 0.01 };
    for step in 0..=40 {
        let bound = store.bind();
        let out = vfim_loss_batched(&p, &i, &heads, &bound)?;
        if step % 10 == 0 {
            println!("step {step:2}: loss {:+.4}  encoder cosine {:+.4}", out.loss.item(), out.encoded_cosine);
        }
        out.loss.backward()?;
        sgd.step(&mut store, &bound);
    }
    Ok(())
}
