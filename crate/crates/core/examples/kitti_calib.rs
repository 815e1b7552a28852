//! Reads a KITTI calibration file and projects LiDAR points to pixels.
//!
//!     cargo run --example kitti_calib -- path/to/calib.txt

use std::path::PathBuf;

use voxelfuse::geom::Vector3;
use voxelfuse::pipeline::parse_kitti_calib;

fn main() -> voxelfuse::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti_000000_calib.txt"));
    let calib = parse_kitti_calib(&path)?;
    println!("{}", calib.projection());
    for p in [[20.0, -3.0, -1.0], [8.5, 2.25, 0.4], [-5.0, 0.0, 0.0]] {
        match calib.project(&Vector3::from(p)) {
            Some(px) => println!("{p:?} -> u {:.4}  v {:.4}  depth {:.3}", px.u, px.v, px.depth),
            None => println!("{p:?} is behind the camera"),
        }
    }
    Ok(())
}
