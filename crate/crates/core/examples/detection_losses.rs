//! Box residual coding and the scalar detection losses.

use voxelfuse::geom::{iou_3d, Box3D};
use voxelfuse::losses::{
    decode_box, encode_box, focal_loss, iou_target, rcnn_loss, rpn_loss, smooth_l1, total_loss, LossWeights,
};

fn main() -> voxelfuse::Result<()> {
    let anchor = Box3D::new([20.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0)?;
    let gt = Box3D::new([20.6, -0.3, -0.9], [4.2, 1.7, 1.5], 0.3)?;
    let r = encode_box(&gt, &anchor);
    println!("residual {r:.4?}");
    let back = decode_box(&anchor, &r)?;
    println!("decoded IoU with the original {:.12}", iou_3d(&back, &gt));
    println!("anchor IoU {:.4}, confidence target {:.4}", iou_3d(&anchor, &gt), iou_target(iou_3d(&anchor, &gt)));

    for p in [0.1, 0.5, 0.9] {
        println!("focal p={p}: positive {:.5}  negative {:.5}", focal_loss(p, true, 0.25, 2.0), focal_loss(p, false, 0.25, 2.0));
    }
    println!("smooth-L1 at 0.05 / 0.5 with beta 1/9: {:.5} / {:.5}", smooth_l1(0.05, 1.0 / 9.0), smooth_l1(0.5, 1.0 / 9.0));

    let w = LossWeights::default();
    let rpn = rpn_loss(&[(0.8, true), (0.3, false), (0.1, false)], &[[0.1, -0.05, 0.0, 0.02, 0.0, 0.01, 0.2]], &w);
    let rcnn = rcnn_loss(&[(0.7, 0.8), (0.2, 0.3)], &[[0.05; 7]]);
    println!("L_rpn {rpn:.5}  L_rcnn {rcnn:.5}  total with L_vfim=-0.4: {:.5}", total_loss(rpn, rcnn, -0.4, w.gamma_vfim));
    Ok(())
}
