//! Minimal single-anchor proposal head over the fused grid, plus a small
//! refinement head, so the training demo has proposals to pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::VoxelFeatures;
use crate::error::{Error, Result};
use crate::geom::{aabb_iou, iou_3d, Box3D, GridSpec};
use crate::losses::{decode_box, encode_box, sigmoid, AnchorTargets};
use crate::numgrad::{BoundParams, LinearMap, ParamStore, Value};
use crate::vfim::voxel_roi_pool_batch;

/// KITTI car prior (length, width, height).
pub const CAR_SIZE: [f64; 3] = [3.9, 1.6, 1.56];
pub const NMS_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub size: [f64; 3],
    /// Height of every anchor centre.
    pub z: f64,
    /// Anchors at or above this IoU with a ground truth are positive.
    pub pos_iou: f64,
    /// Anchors below this IoU with every ground truth are negative.
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            size: CAR_SIZE,
            z: -1.73 + 0.5 * CAR_SIZE[2],
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) || !self.z.is_finite() {
            return Err(Error::Config(format!("bad anchor geometry {self:?}")));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "anchor thresholds need 0 <= neg_iou <= pos_iou <= 1, got {} and {}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }

    /// One yaw-0 anchor per BEV cell, row `x * Y + y`.
    pub fn anchors(&self, grid: &GridSpec) -> Vec<Box3D> {
        let [nx, ny, _] = grid.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                let cx = grid.origin[0] + (x as f64 + 0.5) * grid.voxel_size[0];
                let cy = grid.origin[1] + (y as f64 + 0.5) * grid.voxel_size[1];
                out.push(Box3D::new([cx, cy, self.z], self.size, 0.0).expect("validated anchor"));
            }
        }
        out
    }
}

/// Labels anchors against ground truth. Each ground truth's best anchor
/// is forced positive so every object gets at least one.
pub fn assign_anchors(anchors: &[Box3D], gt: &[Box3D], cfg: &AnchorConfig) -> AnchorTargets {
    let reach = |a: &Box3D, g: &Box3D| {
        let r = 0.5 * (a.size[0].hypot(a.size[1]) + g.size[0].hypot(g.size[1]));
        (a.center[0] - g.center[0]).hypot(a.center[1] - g.center[1]) < r
    };
    let mut best_for_anchor = vec![(0.0f64, None::<usize>); anchors.len()];
    let mut best_for_gt = vec![(0.0f64, None::<usize>); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if !reach(a, g) {
                continue;
            }
            let v = iou_3d(a, g);
            if v > best_for_anchor[ai].0 {
                best_for_anchor[ai] = (v, Some(gi));
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, Some(ai));
            }
        }
    }
    let mut labels: Vec<Option<bool>> = best_for_anchor
        .iter()
        .map(|&(v, _)| {
            if v >= cfg.pos_iou {
                Some(true)
            } else if v < cfg.neg_iou {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    let mut matched: Vec<Option<usize>> = best_for_anchor.iter().map(|b| b.1).collect();
    for (gi, &(_, anchor)) in best_for_gt.iter().enumerate() {
        if let Some(ai) = anchor {
            labels[ai] = Some(true);
            matched[ai] = Some(gi);
        }
    }
    let reg_targets = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Some(true))
        .map(|(ai, _)| {
            let gi = matched[ai].expect("positive anchors are matched");
            (ai, encode_box(&gt[gi], &anchors[ai]))
        })
        .collect();
    AnchorTargets { labels, reg_targets }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub boxed: Box3D,
    pub score: f64,
    /// BEV cell the proposal was decoded from.
    pub cell: usize,
}

/// Greedy suppression by axis-aligned IoU, highest score first with ties
/// broken by lower cell index; stops after `top_k` survivors.
pub fn nms_axis_aligned(cands: &[Proposal], iou: f64, top_k: usize) -> Vec<Proposal> {
    let mut order: Vec<&Proposal> = cands.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Proposal> = Vec::new();
    for c in order {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| aabb_iou(&k.boxed, &c.boxed) <= iou) {
            kept.push(*c);
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// Classification logits `[X*Y x 1]`.
    pub logits: Value,
    /// Box residuals `[X*Y x 7]` relative to each cell's anchor.
    pub residuals: Value,
}

/// Per-BEV-cell linear head over the fused grid's max-over-Z collapse.
#[derive(Debug, Clone)]
pub struct ProposalHead {
    pub map: LinearMap,
    pub anchor: AnchorConfig,
}

impl ProposalHead {
    pub fn init(store: &mut ParamStore, channels: usize, anchor: AnchorConfig, rng: &mut impl Rng) -> Self {
        Self {
            map: LinearMap::init(store, "rpn", channels, 8, true, rng),
            anchor,
        }
    }

    pub fn forward(&self, fused: &(impl VoxelFeatures + ?Sized), bound: &BoundParams) -> Result<RpnOutput> {
        let out = self.map.forward(&fused.bev_max()?, bound)?;
        Ok(RpnOutput {
            logits: out.slice_cols(0, 1)?,
            residuals: out.slice_cols(1, 8)?,
        })
    }

    /// Decodes every cell against its anchor.
    pub fn decode(&self, out: &RpnOutput, anchors: &[Box3D]) -> Result<Vec<Proposal>> {
        if anchors.len() != out.logits.len() {
            return Err(Error::shape(
                "propose",
                format!("{} anchors for {} cells", anchors.len(), out.logits.len()),
            ));
        }
        let res = out.residuals.values();
        anchors
            .iter()
            .enumerate()
            .map(|(cell, a)| {
                Ok(Proposal {
                    boxed: decode_box(a, &res[cell * 7..cell * 7 + 7])?,
                    score: sigmoid(out.logits.values()[cell]),
                    cell,
                })
            })
            .collect()
    }
}

/// Runs the head over `fused` and returns at most `top_k` boxes after NMS.
pub fn propose(fused: &(impl VoxelFeatures + ?Sized), head: &ProposalHead, bound: &BoundParams, top_k: usize) -> Result<Vec<Proposal>> {
    if top_k == 0 {
        return Err(Error::Contract("propose: top_k must be at least 1".into()));
    }
    let out = head.forward(fused, bound)?;
    let cands = head.decode(&out, &head.anchor.anchors(fused.spec()))?;
    Ok(nms_axis_aligned(&cands, NMS_IOU, top_k))
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Confidence logits `[K x 1]`.
    pub iou_logits: Value,
    /// Residuals `[K x 7]` relative to each proposal.
    pub residuals: Value,
}

/// Linear confidence and box head over RoI-pooled fused features.
#[derive(Debug, Clone)]
pub struct RefineHead {
    pub map: LinearMap,
    pub pool: usize,
}

impl RefineHead {
    pub fn init(store: &mut ParamStore, channels: usize, pool: usize, rng: &mut impl Rng) -> Self {
        Self {
            map: LinearMap::init(store, "refine", pool.pow(3) * channels, 8, true, rng),
            pool,
        }
    }

    pub fn forward(&self, fused: &(impl VoxelFeatures + ?Sized), boxes: &[Box3D], bound: &BoundParams) -> Result<RefineOutput> {
        let pooled = voxel_roi_pool_batch(fused, boxes, self.pool)?;
        let out = self.map.forward(&pooled, bound)?;
        Ok(RefineOutput {
            iou_logits: out.slice_cols(0, 1)?,
            residuals: out.slice_cols(1, 8)?,
        })
    }
}
