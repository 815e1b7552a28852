//! Short end-to-end training run on the toy profile.
//!
//!     cargo run --release --example train_demo -- 60

use voxelfuse::pipeline::{train_demo_with, RunConfig};

fn main() -> voxelfuse::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.train.steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let report = train_demo_with(&cfg, |r| {
        if r.step % 10 == 0 {
            println!("{:4}  total {:8.4}  rpn {:8.4}  rcnn {:7.4}  vfim {:+.4}", r.step, r.total, r.rpn, r.rcnn, r.vfim);
        }
    })?;
    let (first, last) = (report.rows[0].total, report.rows[report.rows.len() - 1].total);
    println!("L_total {first:.4} -> {last:.4}; encoder cosine on ground truth {:.4}", report.final_cosine);
    Ok(())
}
