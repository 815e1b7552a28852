//! Run configuration. Files are TOML, written as flat dotted keys:
//!
//! ```text
//! seed = 3
//! qfm.lambda = 4
//! train.steps = 50
//! lidar_grid.dims = [88, 100, 40]
//! ```
//!
//! Every key is optional; omitted keys keep the toy-profile default.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::detector::AnchorConfig;
use crate::error::{Error, Result};
use crate::geom::{Calibration, DepthBinSpec, GridSpec};
use crate::losses::LossWeights;
use crate::qfm::AttentionConfig;
use crate::vfim::{DEFAULT_HEAD_WIDTH, DEFAULT_POOL_SIZE};

/// Synthetic pinhole camera looking along LiDAR +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera origin in the LiDAR frame.
    pub offset: [f64; 3],
    /// Image pixels per feature cell.
    pub stride: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 96,
            fx: 160.0,
            fy: 160.0,
            cx: 160.0,
            cy: 48.0,
            offset: [-0.27, 0.0, -0.08],
            stride: 4,
        }
    }
}

impl CameraConfig {
    pub fn calibration(&self) -> Result<Calibration> {
        Calibration::forward_pinhole(self.fx, self.fy, self.cx, self.cy, Vector3::from(self.offset))
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.width / self.stride, self.height / self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.width % self.stride != 0 || self.height % self.stride != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "camera: {}x{} image must be a nonzero multiple of stride {}",
                self.width, self.height, self.stride
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera: focal lengths must be positive".into()));
        }
        self.calibration().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Surface points per square metre of box face.
    pub point_density: f64,
    /// Standard deviation of the Gaussian jitter on every point.
    pub noise_sigma: f64,
    pub ground_points: usize,
    pub ground_z: f64,
    /// Forward range in which boxes and ground points are placed.
    pub x_range: [f64; 2],
    /// Standard deviation of background image features.
    pub background: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_boxes: 1,
            max_boxes: 5,
            point_density: 40.0,
            noise_sigma: 0.02,
            ground_points: 2000,
            ground_z: -1.73,
            x_range: [6.0, 40.0],
            background: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Distinct scenes cycled through during training.
    pub scenes: usize,
    /// Proposals kept after NMS.
    pub top_k: usize,
    /// Proposals sampled for the second stage and VFIM.
    pub samples: usize,
    pub pos_iou: f64,
    pub pool: usize,
    pub head_width: usize,
    /// Append ground-truth boxes to the proposal list before sampling.
    pub gt_proposals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps: 200,
            scenes: 4,
            top_k: 32,
            samples: 16,
            pos_iou: 0.55,
            pool: DEFAULT_POOL_SIZE,
            head_width: DEFAULT_HEAD_WIDTH,
            gt_proposals: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Feature width `C_F` of both modalities.
    pub channels: usize,
    /// Divisor of the per-voxel point count channel.
    pub count_norm: f64,
    pub lidar_grid: GridSpec,
    pub image_grid: GridSpec,
    pub depth: DepthBinSpec,
    pub camera: CameraConfig,
    pub qfm: AttentionConfig,
    pub loss: LossWeights,
    pub anchor: AnchorConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale profile: the [0, 70.4] x [-40, 40] x [-3, 1] m range at
    /// 88x100x40 LiDAR voxels and 22x25x10 image voxels, 16 channels, 20
    /// depth bins.
    pub fn toy() -> Self {
        let lo = [0.0, -40.0, -3.0];
        Self {
            seed: 0,
            channels: 16,
            count_norm: 8.0,
            lidar_grid: GridSpec {
                origin: lo,
                voxel_size: [0.8, 0.8, 0.1],
                dims: [88, 100, 40],
            },
            image_grid: GridSpec {
                origin: lo,
                voxel_size: [3.2, 3.2, 0.4],
                dims: [22, 25, 10],
            },
            depth: DepthBinSpec {
                d_min: 0.0,
                d_max: 70.4,
                bins: 20,
            },
            camera: CameraConfig::default(),
            qfm: AttentionConfig::default(),
            loss: LossWeights::default(),
            anchor: AnchorConfig::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.lidar_grid.validate()?;
        self.image_grid.validate()?;
        self.depth.validate()?;
        self.camera.validate()?;
        self.qfm.validate()?;
        self.loss.validate()?;
        self.anchor.validate()?;
        if !self.image_grid.covers(&self.lidar_grid) {
            return Err(Error::Config(format!(
                "image grid {:?} does not cover the LiDAR grid {:?}",
                self.image_grid, self.lidar_grid
            )));
        }
        if self.channels < 5 {
            return Err(Error::Config(format!(
                "channels must be at least 5 to hold the voxel statistics, got {}",
                self.channels
            )));
        }
        if !(self.count_norm > 0.0) {
            return Err(Error::Config("count_norm must be positive".into()));
        }
        let s = &self.scene;
        if s.min_boxes > s.max_boxes {
            return Err(Error::Config(format!(
                "scene.min_boxes {} exceeds scene.max_boxes {}",
                s.min_boxes, s.max_boxes
            )));
        }
        if !(s.point_density > 0.0 && s.noise_sigma >= 0.0 && s.background >= 0.0) {
            return Err(Error::Config("scene: density must be positive, noise nonnegative".into()));
        }
        if !(0.0 < s.x_range[0] && s.x_range[0] < s.x_range[1]) {
            return Err(Error::Config(format!("scene.x_range must be increasing and positive, got {:?}", s.x_range)));
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be nonnegative, got {}", t.lr)));
        }
        if t.samples == 0 || t.samples % 2 != 0 {
            return Err(Error::Config(format!("train.samples must be even and positive, got {}", t.samples)));
        }
        if t.top_k == 0 || t.scenes == 0 || t.pool == 0 || t.head_width == 0 {
            return Err(Error::Config("train.top_k, train.scenes, train.pool and train.head_width must be positive".into()));
        }
        Ok(())
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => format!(" (line {})", text[..r.start.min(text.len())].lines().count().max(1)),
        None => String::new(),
    }
}
