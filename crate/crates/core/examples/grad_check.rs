//! Finite-difference audit of every differentiable op and of the composed
//! lift, fusion and interaction graph.

use std::collections::BTreeMap;

use voxelfuse::gradsuite::{run_grad_suite, GRAD_EPS, GRAD_TOL};

fn main() -> voxelfuse::Result<()> {
    let recs = run_grad_suite(&[0, 1, 2], GRAD_EPS)?;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &recs {
        let e = worst.entry(r.check).or_default();
        *e = e.max(r.error);
    }
    for (check, err) in &worst {
        println!("{check:28} {err:.2e} {}", if *err < GRAD_TOL { "ok" } else { "FAIL" });
    }
    Ok(())
}
