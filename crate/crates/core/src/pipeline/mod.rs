//! Configuration, synthetic data, calibration ingestion, the training
//! demo, and the command implementations behind the `voxelfuse` binary.

pub mod commands;
pub mod config;
pub mod kitti;
pub mod scene;
pub mod train;

pub use config::{CameraConfig, RunConfig, SceneConfig, TrainConfig};
pub use kitti::{parse_kitti_calib, parse_kitti_calib_str};
pub use scene::{gen_scene, voxelize_points, SceneSummary, SyntheticScene};
pub use train::{ablation, train_demo, train_demo_with, write_loss_csv, AblationReport, LossRow, Model, TrainReport};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "VOXELFUSE_THREADS";

/// Thread cap from `VOXELFUSE_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Caps the global rayon pool at `VOXELFUSE_THREADS`. Calling it again
/// after the pool exists is harmless.
pub fn configure_threads() -> Result<()> {
    if let Some(n) = thread_cap()? {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
