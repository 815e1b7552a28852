//! Generates one synthetic scene and summarises it.
//!
//!     cargo run --release --example gen_scene -- 7

use voxelfuse::pipeline::{gen_scene, voxelize_points, RunConfig};

fn main() -> voxelfuse::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig::toy();
    let scene = gen_scene(&cfg, seed)?;
    println!("seed {seed}: {} points, {} boxes", scene.points.len(), scene.gt_boxes.len());
    for b in &scene.gt_boxes {
        let inside = scene.points.iter().filter(|p| b.contains(p)).count();
        println!(
            "  centre ({:6.2}, {:6.2}, {:5.2})  yaw {:5.2}  {inside} points inside",
            b.center[0], b.center[1], b.center[2], b.yaw
        );
    }
    let grid = voxelize_points(&scene.points, &cfg.lidar_grid, cfg.channels, cfg.count_norm)?;
    let occupied = grid.data.values().chunks(cfg.channels).filter(|v| v[3] != 0.0).count();
    println!("{occupied} of {} LiDAR voxels occupied", cfg.lidar_grid.num_voxels());
    Ok(())
}
