//! Detection objective: focal classification, smooth-L1 box regression,
//! the RPN and refinement compositions, and the total loss with the VFIM
//! term.
//!
//! Scalar functions take plain numbers and serve as the reference; the
//! `*_graph` functions build the same quantities on [`Value`]s.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, Box3D};
use crate::numgrad::{pairwise_sum, GatherPlan, Tensor, Value};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Smooth-L1 knee for RPN box regression.
pub const RPN_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 knee for proposal refinement.
pub const REFINE_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_vfim: f64,
    pub omega1: f64,
    pub omega2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_vfim: 0.1,
            omega1: 1.0,
            omega2: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.gamma_vfim, self.omega1, self.omega2]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// `-α_t (1 - p_t)^γ log p_t`.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_p(p);
    let (pt, at) = if positive { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Binary cross-entropy of probability `p` against soft target `t`.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = clamp_p(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// IoU-guided confidence target `clamp(2·IoU - 0.5, 0, 1)`.
pub fn iou_target(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Sum of smooth-L1 over one 7-DoF residual whose last entry is the raw
/// yaw difference, penalised through its sine.
pub fn box_residual_loss(residual: &[f64; 7], beta: f64) -> f64 {
    let terms: Vec<f64> = residual
        .iter()
        .enumerate()
        .map(|(i, &d)| smooth_l1(if i == 6 { d.sin() } else { d }, beta))
        .collect();
    pairwise_sum(&terms)
}

/// `ω₁·mean(focal over anchors) + ω₂·mean(box loss over positives)`.
/// `cls` holds `(probability, is_positive)` per anchor; `reg` holds
/// `prediction - target` for each positive anchor.
pub fn rpn_loss(cls: &[(f64, bool)], reg: &[[f64; 7]], w: &LossWeights) -> f64 {
    let focal: Vec<f64> = cls
        .iter()
        .map(|&(p, y)| focal_loss(p, y, FOCAL_ALPHA, FOCAL_GAMMA))
        .collect();
    let boxes: Vec<f64> = reg.iter().map(|r| box_residual_loss(r, RPN_BETA)).collect();
    w.omega1 * mean(&focal) + w.omega2 * mean(&boxes)
}

/// `L_iou + L_refine`; `iou` holds `(confidence, IoU with ground truth)`
/// per sampled proposal, `refine` holds residuals of positive proposals.
pub fn rcnn_loss(iou: &[(f64, f64)], refine: &[[f64; 7]]) -> f64 {
    let conf: Vec<f64> = iou.iter().map(|&(p, v)| bce(p, iou_target(v))).collect();
    let boxes: Vec<f64> = refine.iter().map(|r| box_residual_loss(r, REFINE_BETA)).collect();
    mean(&conf) + mean(&boxes)
}

pub fn total_loss(rpn: f64, rcnn: f64, vfim: f64, gamma: f64) -> f64 {
    rpn + rcnn + gamma * vfim
}

/// 7-DoF residual of `gt` relative to `anchor`: centre offsets scaled by
/// the footprint diagonal (height for z), log size ratios, yaw difference.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let diag = anchor.size[0].hypot(anchor.size[1]);
    [
        (gt.center[0] - anchor.center[0]) / diag,
        (gt.center[1] - anchor.center[1]) / diag,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        normalize_angle(gt.yaw - anchor.yaw),
    ]
}

/// Inverse of [`encode_box`]; sizes are positive by construction.
pub fn decode_box(anchor: &Box3D, r: &[f64]) -> Result<Box3D> {
    let diag = anchor.size[0].hypot(anchor.size[1]);
    // Clamp log-ratios so a wild prediction cannot overflow.
    let sz = |i: usize| anchor.size[i] * r[3 + i].clamp(-10.0, 10.0).exp();
    Box3D::new(
        [
            anchor.center[0] + r[0] * diag,
            anchor.center[1] + r[1] * diag,
            anchor.center[2] + r[2] * anchor.size[2],
        ],
        [sz(0), sz(1), sz(2)],
        anchor.yaw + r[6],
    )
    .map_err(|e| Error::numeric("decode_box", e.to_string()))
}

/// Elementwise focal loss on logits. `labels` holds 1.0 for positives and
/// 0.0 for negatives.
pub fn sigmoid_focal_graph(logits: &Value, labels: &[f64], alpha: f64, gamma: f64) -> Result<Value> {
    if logits.len() != labels.len() {
        return Err(Error::shape(
            "sigmoid_focal",
            format!("{} logits, {} labels", logits.len(), labels.len()),
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut dx = Vec::with_capacity(labels.len());
    for (&x, &y) in logits.values().iter().zip(labels) {
        let s = if y > 0.5 { 1.0 } else { -1.0 };
        let at = if y > 0.5 { alpha } else { 1.0 - alpha };
        let raw = sigmoid(s * x);
        let pt = clamp_p(raw);
        let q = 1.0 - pt;
        out.push(-at * q.powf(gamma) * pt.ln());
        dx.push(if pt != raw {
            0.0
        } else {
            at * s * (gamma * pt * q.powf(gamma) * pt.ln() - q.powf(gamma + 1.0))
        });
    }
    let dx = Rc::new(dx);
    Ok(Value::from_op(
        Tensor::new(logits.shape().to_vec(), out)?,
        vec![logits.clone()],
        Box::new(move |g, ps| {
            ps[0].accumulate_with(|acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * dx[i];
                }
            })
        }),
    ))
}

/// Elementwise binary cross-entropy of `sigmoid(logits)` against soft
/// targets, with the same probability clamp as [`bce`].
pub fn bce_logits_graph(logits: &Value, targets: &[f64]) -> Result<Value> {
    if logits.len() != targets.len() {
        return Err(Error::shape(
            "bce_logits",
            format!("{} logits, {} targets", logits.len(), targets.len()),
        ));
    }
    let mut out = Vec::with_capacity(targets.len());
    let mut dx = Vec::with_capacity(targets.len());
    for (&x, &t) in logits.values().iter().zip(targets) {
        let raw = sigmoid(x);
        let p = clamp_p(raw);
        out.push(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()));
        dx.push(if p != raw { 0.0 } else { p - t });
    }
    let dx = Rc::new(dx);
    Ok(Value::from_op(
        Tensor::new(logits.shape().to_vec(), out)?,
        vec![logits.clone()],
        Box::new(move |g, ps| {
            ps[0].accumulate_with(|acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * dx[i];
                }
            })
        }),
    ))
}

/// Elementwise smooth-L1.
pub fn smooth_l1_graph(d: &Value, beta: f64) -> Value {
    let out: Vec<f64> = d.values().iter().map(|&x| smooth_l1(x, beta)).collect();
    let data = Tensor::new(d.shape().to_vec(), out).expect("same shape");
    Value::from_op(
        data,
        vec![d.clone()],
        Box::new(move |g, ps| {
            let x = ps[0].values();
            ps[0].accumulate_with(|acc| {
                for i in 0..acc.len() {
                    let s = if x[i].abs() < beta { x[i] / beta } else { x[i].signum() };
                    acc[i] += g[i] * s;
                }
            })
        }),
    )
}

/// Mean per-box regression loss over the selected rows of `pred`
/// (`[N x 7]`) against `targets`; zero when no rows are selected.
pub fn box_regression_graph(pred: &Value, rows: &[usize], targets: &[[f64; 7]], beta: f64) -> Result<Value> {
    if rows.len() != targets.len() {
        return Err(Error::shape(
            "box_regression",
            format!("{} rows, {} targets", rows.len(), targets.len()),
        ));
    }
    if rows.is_empty() {
        return Ok(Value::constant(Tensor::scalar(0.0)));
    }
    let n = pred.shape().first().copied().unwrap_or(0);
    let picked = pred.gather(&Rc::new(GatherPlan::select(n, rows)), 7)?;
    let tgt = Value::constant(Tensor::new(
        vec![rows.len(), 7],
        targets.iter().flatten().copied().collect(),
    )?);
    let diff = picked.sub(&tgt)?;
    let residual = Value::concat_cols(&[diff.slice_cols(0, 6)?, diff.slice_cols(6, 7)?.sin()])?;
    Ok(smooth_l1_graph(&residual, beta)
        .sum()
        .scale(1.0 / rows.len() as f64))
}

/// Anchor labels: `Some(true)` positive, `Some(false)` negative, `None`
/// ignored. `reg_targets` lists `(anchor row, residual)` for positives.
#[derive(Debug, Clone, Default)]
pub struct AnchorTargets {
    pub labels: Vec<Option<bool>>,
    pub reg_targets: Vec<(usize, [f64; 7])>,
}

#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub total: Value,
    pub cls: Value,
    pub reg: Value,
}

/// Graph form of [`rpn_loss`]: `cls_logits` is `[A x 1]`, `reg` is
/// `[A x 7]`.
pub fn rpn_loss_graph(cls_logits: &Value, reg: &Value, targets: &AnchorTargets, w: &LossWeights) -> Result<RpnLoss> {
    let a = cls_logits.len();
    if targets.labels.len() != a {
        return Err(Error::shape(
            "rpn_loss",
            format!("{} labels for {a} anchors", targets.labels.len()),
        ));
    }
    let (rows, labels): (Vec<usize>, Vec<f64>) = targets
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|p| (i, if p { 1.0 } else { 0.0 })))
        .unzip();
    let cls = if rows.is_empty() {
        Value::constant(Tensor::scalar(0.0))
    } else {
        let picked = cls_logits.gather(&Rc::new(GatherPlan::select(a, &rows)), 1)?;
        sigmoid_focal_graph(&picked, &labels, FOCAL_ALPHA, FOCAL_GAMMA)?.mean()
    };
    let (pos_rows, pos_targets): (Vec<usize>, Vec<[f64; 7]>) = targets.reg_targets.iter().copied().unzip();
    let reg_loss = box_regression_graph(reg, &pos_rows, &pos_targets, RPN_BETA)?;
    let total = cls.scale(w.omega1).add(&reg_loss.scale(w.omega2))?;
    Ok(RpnLoss {
        total,
        cls,
        reg: reg_loss,
    })
}

#[derive(Debug, Clone)]
pub struct RcnnLoss {
    pub total: Value,
    pub iou: Value,
    pub refine: Value,
}

/// Graph form of [`rcnn_loss`]: `iou_logits` is `[K x 1]`, `refine` is
/// `[K x 7]`; `ious` gives each proposal's IoU with its ground truth and
/// `refine_targets` lists `(row, residual)` for positives.
pub fn rcnn_loss_graph(
    iou_logits: &Value,
    ious: &[f64],
    refine: &Value,
    refine_targets: &[(usize, [f64; 7])],
) -> Result<RcnnLoss> {
    let targets: Vec<f64> = ious.iter().map(|&v| iou_target(v)).collect();
    let iou = if targets.is_empty() {
        Value::constant(Tensor::scalar(0.0))
    } else {
        bce_logits_graph(iou_logits, &targets)?.mean()
    };
    let (rows, res): (Vec<usize>, Vec<[f64; 7]>) = refine_targets.iter().copied().unzip();
    let refine = box_regression_graph(refine, &rows, &res, REFINE_BETA)?;
    Ok(RcnnLoss {
        total: iou.add(&refine)?,
        iou,
        refine,
    })
}

/// `L_rpn + L_rcnn + γ·L_vfim` on the graph.
pub fn total_loss_graph(rpn: &Value, rcnn: &Value, vfim: &Value, gamma: f64) -> Result<Value> {
    rpn.add(rcnn)?.add(&vfim.scale(gamma))
}
